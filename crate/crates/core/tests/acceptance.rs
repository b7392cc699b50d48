//! Acceptance criteria, one line each. Hard criteria fail the run; the
//! progressive-saliency trend is soft (reported only) and the public
//! parasite dataset run is skipped unless `FLIM_SMANSONI_DIR` points to it.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use flim::decoder::{decode, DecoderConfig, Upsample};
use flim::encoder::{
    build_bofp, count_parameters, estimate_block_bofp, train_encoder, BlockSpec, EncoderMode, TrainingImage,
};
use flim::markers::{Label, Marker, MarkerSet};
use flim::pipeline::{
    ingest, run_end_to_end, synth_dataset, GridSpec, PipelineConfig, RunManifest, SplitSpec, SynthConfig,
    MANIFEST_FILE, MARKERS_DIR,
};
use flim::postproc::{dynamic_trees, otsu_bin, BinaryMask, SeedSet};
use flim::tensor::{convolve, pool, FeatureMap, PoolKind};
use flim::{KernelBank, SaliencyMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(PartialEq)]
enum Outcome {
    Pass,
    Fail,
    Soft,
    Skip,
}

struct Line {
    outcome: Outcome,
    detail: String,
}

fn pass(ok: bool, detail: String) -> Line {
    Line {
        outcome: if ok { Outcome::Pass } else { Outcome::Fail },
        detail,
    }
}

fn within(budget: Duration, elapsed: Duration) -> bool {
    elapsed < budget
}

/// Generated once and shared by the criteria that run on the synthetic set.
struct Synthetic {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Synthetic {
    fn new() -> Self {
        let dir = tempfile::tempdir().expect("tempdir");
        let root = dir.path().join("synthetic");
        synth_dataset(&root, &SynthConfig::default()).expect("synthetic dataset");
        Self { _dir: dir, root }
    }

    fn config(&self) -> PipelineConfig {
        PipelineConfig::load(self.root.join("pipeline.json")).expect("pipeline config")
    }

    fn training(&self) -> Vec<TrainingImage> {
        let config = self.config();
        let index = ingest(&self.root).unwrap();
        let split = config.resolve_split(&index).unwrap();
        index.training_images(&split.train).unwrap()
    }
}

fn random_map(rng: &mut ChaCha8Rng, w: usize, h: usize, m: usize, hi: f32) -> FeatureMap {
    FeatureMap::from_fn(w, h, m, |_, _, _| rng.random_range(0.0..hi)).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn bias_identity(data: &Synthetic) -> Line {
    let start = Instant::now();
    let images = data.training();
    let spec = BlockSpec::new(3, 2);
    let built = build_bofp(&images, spec.kernels_per_marker, spec.k, spec.dilation, 42).unwrap();
    let mut inputs: Vec<FeatureMap> = images.iter().map(|t| t.image.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let mut kernels = 0;
    let mut checked = 0;
    // The first two blocks: raw colors, then ReLU activations.
    for block in 0..2 {
        let domains: Vec<_> = inputs.iter().map(|m| (m.width(), m.height())).collect();
        let est = estimate_block_bofp(&inputs, &built.bag.map_to(inputs[0].scale(), &domains), &spec).unwrap();
        let (mu, sigma) = (&est.stats.mean, &est.stats.std);
        let len = est.bank.kernel_len();
        let hi = inputs.iter().flat_map(|m| m.data()).fold(0.0f32, |a, &v| a.max(v)).max(1e-3);
        kernels += est.bank.len();
        for _ in 0..1000 {
            let q: Vec<f64> = (0..len).map(|_| f64::from(rng.random_range(0.0..hi))).collect();
            let q_norm = dot(&q, &q).sqrt();
            let z: Vec<f64> = q.iter().zip(mu).zip(sigma).map(|((v, m), s)| (v - m) / s).collect();
            for i in 0..est.bank.len() {
                let k: Vec<f64> = est.bank.kernel(i).iter().map(|&w| f64::from(w)).collect();
                let bias = f64::from(est.bank.bias(i).unwrap());
                // The unit direction the kernel was scaled from.
                let unit: Vec<f64> = k.iter().zip(sigma).map(|(w, s)| w * s).collect();
                let lhs = dot(&q, &k) + bias;
                let rhs = dot(&z, &unit);
                worst = worst.max((lhs - rhs).abs() / (1.0 + q_norm));
                checked += 1;
            }
        }
        if block == 0 {
            let bank = est.bank.clone();
            inputs = inputs
                .iter()
                .map(|m| pool(&flim::tensor::relu(&convolve(m, &bank, 1).unwrap()), PoolKind::Max, 3, 2).unwrap())
                .collect();
        }
    }
    let elapsed = start.elapsed();
    pass(
        worst <= 1e-5 && within(Duration::from_secs(5), elapsed),
        format!(
            "{checked} patch-kernel pairs over {kernels} kernels in 2 blocks, max |diff|/(1+|Q|) = {worst:.2e} (tol 1e-5), {:.2}s (budget 5s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn read_manifest(dir: &Path) -> RunManifest {
    serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE)).unwrap()).unwrap()
}

fn clustering_counts(data: &Synthetic) -> Line {
    let start = Instant::now();
    let work = tempfile::tempdir().unwrap();
    let root = work.path().join("five");
    // One image with two foreground and three background markers.
    for sub in ["images", "gt", MARKERS_DIR] {
        std::fs::create_dir_all(root.join(sub)).unwrap();
    }
    for id in ["img_000", "img_002"] {
        for sub in ["images", "gt"] {
            std::fs::copy(
                data.root.join(sub).join(format!("{id}.png")),
                root.join(sub).join(format!("{id}.png")),
            )
            .unwrap();
        }
    }
    let full = MarkerSet::load(data.root.join(MARKERS_DIR).join("img_000.json")).unwrap();
    let fg = full.markers.iter().filter(|m| m.label == Label::Foreground).take(2);
    let bg = full.markers.iter().filter(|m| m.label == Label::Background).take(3);
    let five: Vec<Marker> = fg.chain(bg).cloned().collect();
    MarkerSet::new("img_000.png", five)
        .save(root.join(MARKERS_DIR).join("img_000.json"))
        .unwrap();

    let mut config = PipelineConfig::new(&root);
    config.split = SplitSpec::Lists {
        train: vec!["img_000".into()],
        test: vec!["img_002".into()],
    };
    config.blocks = vec![BlockSpec::new(3, 2); 4];
    config.refine = data.config().refine;
    // Sub-millisecond timings are noisy: keep the fastest of three runs.
    let mut manifests = Vec::new();
    for mode in [EncoderMode::Bofp, EncoderMode::Cluster] {
        config.mode = mode;
        let mut best: Option<RunManifest> = None;
        for rep in 0..3 {
            let out = work.path().join(format!("{mode}_{rep}"));
            run_end_to_end(&config, &out).unwrap();
            let m = read_manifest(&out);
            if best.as_ref().is_none_or(|b| m.filter_estimation_secs < b.filter_estimation_secs) {
                best = Some(m);
            }
        }
        manifests.push(best.unwrap());
    }
    let (bofp, cluster) = (&manifests[0], &manifests[1]);
    let elapsed = start.elapsed();
    pass(
        bofp.kmeans_invocations == 5
            && cluster.kmeans_invocations == 20
            && bofp.filter_estimation_secs < cluster.filter_estimation_secs
            && within(Duration::from_secs(120), elapsed),
        format!(
            "4 blocks, 5 markers: k-means runs BoFP {} vs Cluster {} (want 5 vs 20); filter estimation {:.2}ms vs {:.2}ms (best of 3); {:.1}s (budget 120s)",
            bofp.kmeans_invocations,
            cluster.kmeans_invocations,
            bofp.filter_estimation_secs * 1e3,
            cluster.filter_estimation_secs * 1e3,
            elapsed.as_secs_f64()
        ),
    )
}

fn unit_norm_grid() -> Line {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig {
        n_images: 2,
        width: 64,
        height: 64,
        eggs_per_image: (1, 1),
        egg_area: (150, 300),
        impurity_density: 3.0,
        marked_images: 2,
        ..SynthConfig::default()
    };
    synth_dataset(dir.path(), &synth).unwrap();
    let index = ingest(dir.path()).unwrap();
    let ids: Vec<String> = index.entries.iter().map(|e| e.id.clone()).collect();
    let images = index.training_images(&ids).unwrap();
    let points = GridSpec::default().points();
    let mut worst = 0.0f64;
    let mut kernels = 0usize;
    let mut failures = Vec::new();
    for point in &points {
        let specs = point.block_specs(&BlockSpec::default());
        match train_encoder(&images, &specs, EncoderMode::Cluster, 42) {
            Ok(trained) => {
                for block in &trained.model.blocks {
                    for k in block.bank.kernels() {
                        let n = k.iter().map(|&w| f64::from(w).powi(2)).sum::<f64>().sqrt();
                        worst = worst.max((n - 1.0).abs());
                        kernels += 1;
                    }
                }
            }
            Err(e) => failures.push(format!("{point:?}: {e}")),
        }
    }
    let elapsed = start.elapsed();
    pass(
        points.len() == 48 && failures.is_empty() && worst <= 1e-6 && within(Duration::from_secs(600), elapsed),
        format!(
            "{} configs, {} failed{}, {kernels} kernels, max ||K|-1| = {worst:.2e} (tol 1e-6), {:.1}s (budget 600s)",
            points.len(),
            failures.len(),
            failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default(),
            elapsed.as_secs_f64()
        ),
    )
}

/// Literal per-pixel rule: window means per class, three-case weights,
/// ReLU of the weighted channel mean, then min-max normalization.
fn decode_oracle(map: &FeatureMap, labels: &[Label], k: usize) -> Vec<f64> {
    let (w, h, m) = (map.width(), map.height(), map.channels());
    let r = (k / 2) as isize;
    let n_fg = labels.iter().filter(|&&l| l == Label::Foreground).count();
    let n_bg = m - n_fg;
    let mut s = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let (mut sum_f, mut sum_b) = (0.0, 0.0);
            for dy in -r..=r {
                for dx in -r..=r {
                    let (qx, qy) = (x as isize + dx, y as isize + dy);
                    if qx < 0 || qy < 0 || qx >= w as isize || qy >= h as isize {
                        continue;
                    }
                    for (i, label) in labels.iter().enumerate() {
                        let v = f64::from(map.get(qx as usize, qy as usize, i));
                        match label {
                            Label::Foreground => sum_f += v,
                            Label::Background => sum_b += v,
                        }
                    }
                }
            }
            let mu_f = sum_f / (k * k * n_fg) as f64;
            let mu_b = sum_b / (k * k * n_bg) as f64;
            let mut acc = 0.0;
            for (i, label) in labels.iter().enumerate() {
                let alpha = if *label == Label::Foreground && mu_f > mu_b {
                    1.0
                } else if *label == Label::Background && mu_f < mu_b {
                    -1.0
                } else {
                    0.0
                };
                acc += alpha * f64::from(map.get(x, y, i));
            }
            s[y * w + x] = (acc / m as f64).max(0.0);
        }
    }
    let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        s.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
    } else {
        let fill = if hi > 0.0 { 1.0 } else { 0.0 };
        s.iter_mut().for_each(|v| *v = fill);
    }
    s
}

fn decoder_oracle() -> Line {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (w, h) = (rng.random_range(4..24), rng.random_range(4..24));
        let m = rng.random_range(2..9);
        let mut labels: Vec<Label> = (0..m)
            .map(|_| if rng.random_bool(0.5) { Label::Foreground } else { Label::Background })
            .collect();
        labels[0] = Label::Foreground;
        labels[1] = Label::Background;
        let map = random_map(&mut rng, w, h, m, 2.0);
        let k = [1, 3, 5][rng.random_range(0..3)];
        let config = DecoderConfig {
            neighborhood_k: k,
            upsample: Upsample::Bilinear,
        };
        let got = decode(&map, &labels, &config, (w, h)).unwrap();
        let want = decode_oracle(&map, &labels, k);
        for (g, o) in got.data().iter().zip(&want) {
            worst = worst.max((f64::from(*g) - o).abs());
        }
    }
    let elapsed = start.elapsed();
    pass(
        worst <= 1e-6 && within(Duration::from_secs(30), elapsed),
        format!(
            "100 random labeled maps, max |diff| = {worst:.2e} (tol 1e-6), {:.2}s (budget 30s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn parameter_counts(data: &Synthetic) -> Line {
    let images = data.training();
    let mut rows = Vec::new();
    let mut ok = true;
    for blocks in 2..=4 {
        for mode in [EncoderMode::Bofp, EncoderMode::Cluster] {
            let specs = vec![BlockSpec::new(3, 1); blocks];
            let model = train_encoder(&images, &specs, mode, 42).unwrap().model;
            // By hand: every block holds m' kernels of k*k*m_in weights, plus
            // one bias per kernel in BoFP mode.
            let mut m_in = model.input_channels;
            let mut hand = 0;
            for block in &model.blocks {
                let m_out = block.bank.len();
                hand += m_out * 9 * m_in + if mode == EncoderMode::Bofp { m_out } else { 0 };
                m_in = m_out;
            }
            let counted = count_parameters(&model);
            ok &= counted == hand && (1_000..100_000).contains(&counted);
            rows.push(format!("{mode}/{blocks}b={counted}"));
        }
    }
    pass(
        ok,
        format!("k=3, c=1, hand count matches and within [1e3, 1e5): {}", rows.join(", ")),
    )
}

fn end_to_end(data: &Synthetic, work: &Path) -> (Line, Option<flim::pipeline::RunOutcome>) {
    let start = Instant::now();
    let config = data.config();
    let outcome = match run_end_to_end(&config, work.join("e2e")) {
        Ok(o) => o,
        Err(e) => return (pass(false, format!("run failed: {e}")), None),
    };
    let report = outcome.final_report();
    let elapsed = start.elapsed();
    let (f, mae) = (report.f_beta.mean, report.mae.mean);
    let line = pass(
        report.images.len() == 20
            && outcome.manifest.training_images.len() == 2
            && f >= 0.80
            && mae <= 0.05
            && within(Duration::from_secs(180), elapsed),
        format!(
            "{} test / {} marked images, BoFP + refine: F(b2=0.3) = {f:.3}+-{:.3} (min 0.80), MAE = {mae:.4}+-{:.4} (max 0.05), wF = {:.3}; decoder alone F = {:.3}; {:.1}s (budget 180s)",
            report.images.len(),
            outcome.manifest.training_images.len(),
            report.f_beta.std,
            report.mae.std,
            report.weighted_f.mean,
            outcome.decoder_report.f_beta.mean,
            elapsed.as_secs_f64()
        ),
    );
    (line, Some(outcome))
}

fn progressive_trend(outcome: Option<&flim::pipeline::RunOutcome>) -> Line {
    let Some(outcome) = outcome else {
        return Line {
            outcome: Outcome::Soft,
            detail: "no end-to-end run to inspect".into(),
        };
    };
    let rows = &outcome.progressive;
    let good = rows.iter().filter(|r| r.background_non_increasing()).count();
    let share = good as f64 / rows.len().max(1) as f64;
    for r in rows {
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" -> ");
        println!(
            "      {}: background {} | foreground {}",
            r.image,
            fmt(&r.background_mean),
            fmt(&r.foreground_mean)
        );
    }
    Line {
        outcome: if share >= 0.8 { Outcome::Pass } else { Outcome::Soft },
        detail: format!(
            "background saliency non-increasing with depth in {good}/{} images ({:.0}%, soft target 80%)",
            rows.len(),
            share * 100.0
        ),
    }
}

fn exhaustive_otsu(map: &SaliencyMap) -> u8 {
    let q = map.quantized();
    let n = q.len() as f64;
    let mut best = (0u8, f64::NEG_INFINITY);
    let distinct: std::collections::BTreeSet<u8> = q.iter().copied().collect();
    if distinct.len() == 1 {
        return q[0];
    }
    for t in 0..=255u8 {
        let (lo, hi): (Vec<f64>, Vec<f64>) = {
            let lo: Vec<f64> = q.iter().filter(|&&v| v <= t).map(|&v| f64::from(v)).collect();
            let hi: Vec<f64> = q.iter().filter(|&&v| v > t).map(|&v| f64::from(v)).collect();
            (lo, hi)
        };
        if lo.is_empty() || hi.is_empty() {
            continue;
        }
        let (m0, m1) = (
            lo.iter().sum::<f64>() / lo.len() as f64,
            hi.iter().sum::<f64>() / hi.len() as f64,
        );
        let var = (lo.len() as f64 / n) * (hi.len() as f64 / n) * (m0 - m1).powi(2);
        if var > best.1 + 1e-12 {
            best = (t, var);
        }
    }
    best.0
}

fn naive_conv(map: &FeatureMap, bank: &KernelBank, stride: usize) -> Vec<f32> {
    let (w, h, m) = (map.width(), map.height(), map.channels());
    let r = (bank.k() / 2) as isize;
    let (ow, oh) = (w.div_ceil(stride), h.div_ceil(stride));
    let mut out = Vec::with_capacity(ow * oh * bank.len());
    for oy in 0..oh {
        for ox in 0..ow {
            for i in 0..bank.len() {
                let kernel = bank.kernel(i);
                let mut acc = 0.0f64;
                let mut j = 0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (x, y) = ((ox * stride) as isize + dx, (oy * stride) as isize + dy);
                        for c in 0..m {
                            let v = if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                                0.0
                            } else {
                                f64::from(map.get(x as usize, y as usize, c))
                            };
                            acc += v * f64::from(kernel[j]);
                            j += 1;
                        }
                    }
                }
                acc += f64::from(bank.bias(i).unwrap_or(0.0));
                // Stored at the map's precision.
                out.push(acc as f32);
            }
        }
    }
    out
}

fn naive_pool(map: &FeatureMap, kind: PoolKind, window: usize, stride: usize) -> Vec<f32> {
    let (w, h, m) = (map.width(), map.height(), map.channels());
    let back = ((window - 1) / 2) as isize;
    let mut out = Vec::new();
    for oy in 0..h.div_ceil(stride) {
        for ox in 0..w.div_ceil(stride) {
            for c in 0..m {
                let mut values = Vec::new();
                let mut padded = false;
                for y in 0..window as isize {
                    for x in 0..window as isize {
                        let (px, py) = ((ox * stride) as isize - back + x, (oy * stride) as isize - back + y);
                        if px < 0 || py < 0 || px >= w as isize || py >= h as isize {
                            padded = true;
                        } else {
                            values.push(f64::from(map.get(px as usize, py as usize, c)));
                        }
                    }
                }
                let v = match kind {
                    PoolKind::Max => {
                        let mut best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        if padded {
                            best = best.max(0.0);
                        }
                        best
                    }
                    PoolKind::Avg => values.iter().sum::<f64>() / values.len() as f64,
                };
                out.push(v as f32);
            }
        }
    }
    out
}

fn oracles() -> Line {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut otsu_mismatch = 0;
    for i in 0..50 {
        let (w, h) = (rng.random_range(3..40), rng.random_range(3..40));
        // Mix smooth and clustered maps so several histograms are sparse.
        let levels = if i % 2 == 0 { 256 } else { rng.random_range(2..6) };
        let map = SaliencyMap::from_fn(w, h, |_, _| rng.random_range(0..levels) as f32 / (levels - 1) as f32).unwrap();
        if otsu_bin(&map) != exhaustive_otsu(&map) {
            otsu_mismatch += 1;
        }
    }
    let mut conv_worst = 0.0f64;
    let mut pool_worst = 0.0f64;
    for _ in 0..30 {
        let (w, h, m) = (rng.random_range(3..20), rng.random_range(3..20), rng.random_range(1..4));
        let map = random_map(&mut rng, w, h, m, 1.0);
        let k = [1, 3, 5, 7][rng.random_range(0..4)];
        let n = rng.random_range(1..5);
        let kernels: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..k * k * m).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let biases = rng
            .random_bool(0.5)
            .then(|| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect());
        let bank = KernelBank::new(kernels, biases, vec![Label::Foreground; n], k, 1).unwrap();
        let stride = rng.random_range(1..3);
        let got = convolve(&map, &bank, stride).unwrap();
        for (g, o) in got.data().iter().zip(naive_conv(&map, &bank, stride)) {
            conv_worst = conv_worst.max((f64::from(*g) - f64::from(o)).abs());
        }
        for kind in [PoolKind::Max, PoolKind::Avg] {
            let (window, stride) = (rng.random_range(1..5), rng.random_range(1..3));
            let got = pool(&map, kind, window, stride).unwrap();
            for (g, o) in got.data().iter().zip(naive_pool(&map, kind, window, stride)) {
                pool_worst = pool_worst.max((f64::from(*g) - f64::from(o)).abs());
            }
        }
    }
    // Two flat regions, one seed in each: the forest splits exactly at the edge.
    let (w, h) = (24, 16);
    let image = FeatureMap::from_fn(w, h, 3, |x, _, c| if x < 10 { 0.2 + 0.1 * c as f32 } else { 0.8 }).unwrap();
    let seeds = SeedSet {
        internal: BinaryMask::from_fn(w, h, |x, y| (x, y) == (3, 8)),
        external: BinaryMask::from_fn(w, h, |x, y| (x, y) == (20, 4)),
    };
    let dt_exact = dynamic_trees(&image, &seeds).unwrap() == BinaryMask::from_fn(w, h, |x, _| x < 10);
    let elapsed = start.elapsed();
    pass(
        otsu_mismatch == 0
            && conv_worst <= 1e-9
            && pool_worst <= 1e-9
            && dt_exact
            && within(Duration::from_secs(60), elapsed),
        format!(
            "Otsu vs 256-threshold scan: {otsu_mismatch}/50 mismatches; conv max |diff| {conv_worst:.1e}, pool {pool_worst:.1e} (tol 1e-9, f32 storage); two-region DT exact: {dt_exact}; {:.2}s (budget 60s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn smansoni() -> Line {
    let Some(root) = std::env::var_os("FLIM_SMANSONI_DIR").map(PathBuf::from) else {
        return Line {
            outcome: Outcome::Skip,
            detail: "FLIM_SMANSONI_DIR not set; public dataset run skipped".into(),
        };
    };
    if !root.join("images").is_dir() {
        return Line {
            outcome: Outcome::Skip,
            detail: format!("{} has no images/ directory", root.display()),
        };
    }
    let config_path = root.join("pipeline.json");
    let config = if config_path.is_file() {
        PipelineConfig::load(&config_path)
    } else {
        Ok(PipelineConfig::new(&root))
    };
    let out = tempfile::tempdir().unwrap();
    match config.and_then(|c| run_end_to_end(&c, out.path())) {
        Ok(outcome) => {
            let r = outcome.final_report();
            pass(
                true,
                format!(
                    "{} test images: F = {:.3}+-{:.3}, wF = {:.3}+-{:.3}, MAE = {:.3}+-{:.3} (no tolerance asserted)",
                    r.images.len(),
                    r.f_beta.mean,
                    r.f_beta.std,
                    r.weighted_f.mean,
                    r.weighted_f.std,
                    r.mae.mean,
                    r.mae.std
                ),
            )
        }
        Err(e) => pass(false, format!("run failed: {e}")),
    }
}

fn guarded(f: impl FnOnce() -> Line) -> Line {
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)) {
        Ok(line) => line,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            pass(false, format!("panicked: {msg}"))
        }
    }
}

fn main() {
    let data = Synthetic::new();
    let work = tempfile::tempdir().unwrap();
    let mut e2e = None;
    let mut lines: Vec<(&str, Line)> = vec![
        ("bofp-bias-identity", guarded(|| bias_identity(&data))),
        ("clustering-count-efficiency", guarded(|| clustering_counts(&data))),
        ("cluster-unit-norm-grid", guarded(unit_norm_grid)),
        ("decoder-oracle", guarded(decoder_oracle)),
        ("parameter-count-scale", guarded(|| parameter_counts(&data))),
    ];
    lines.push((
        "synthetic-end-to-end",
        guarded(|| {
            let (line, outcome) = end_to_end(&data, work.path());
            e2e = outcome;
            line
        }),
    ));
    println!("progressive saliency diagnostics (per image, block 1 -> n):");
    lines.push(("progressive-background-trend", guarded(|| progressive_trend(e2e.as_ref()))));
    lines.push(("oracles", guarded(oracles)));
    lines.push(("smansoni-replication", guarded(smansoni)));

    println!();
    let mut hard_failures = 0;
    for (name, line) in &lines {
        let tag = match line.outcome {
            Outcome::Pass => "PASS",
            Outcome::Fail => {
                hard_failures += 1;
                "FAIL"
            }
            Outcome::Soft => "SOFT-FAIL",
            Outcome::Skip => "SKIP",
        };
        println!("[{tag}] {name}: {}", line.detail);
    }
    if hard_failures > 0 {
        eprintln!("{hard_failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
