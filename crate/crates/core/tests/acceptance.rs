//! Acceptance suite: one pass/fail line per criterion, nonzero exit on any
//! failure. Oracles here are written independently of the library code.

mod common;

use std::collections::VecDeque;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use adclick_core::clicks::{simulate_next_click, AnomalyMask, Polarity, DEFAULT_NOC_CAP};
use adclick_core::datasets::{load_dataset, Layout, PromptKey, ReferenceBank, Split};
use adclick_core::language::{fuse_language, CrossAttention, LinguisticFeature};
use adclick_core::metrics::{
    aggregate_noc, auroc, average_precision, format_ad_table, format_iis_table, miou, pro, AdRow, AdScores, IisRow,
    IisScores, NocSummary,
};
use adclick_core::network::{
    normalized_focal_loss, nfl_weights, train, AdClickNet, FixedBatchSource, ModelConfig, ModelInput, TrainConfig,
};
use adclick_core::nn::ParamStore;
use adclick_core::pipeline::{
    build_banks, evaluate_iis, fixed_click_batch, prepare_samples, ClickTrainingSource, IisProtocol,
};
use adclick_core::posfar::{compute_posfar, match_reference, PcfGrid};
use adclick_core::segmode::aggregate_max;
use adclick_core::session::{read_sidecar, replay_export, ImageCatalog, PromptChoice, SessionConfig, SessionManager};
use adclick_core::synthetic::{write_dataset, SyntheticConfig};
use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Debug>(r: std::result::Result<T, E>) -> std::result::Result<T, String> {
    r.map_err(|e| format!("{e:?}"))
}

// ---------- metric oracles ----------

fn auroc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let mut twice_u = 0u64;
    let (mut p, mut n) = (0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            n += 1;
            continue;
        }
        p += 1;
        for (j, &lj) in labels.iter().enumerate() {
            if !lj {
                twice_u += if scores[i] > scores[j] {
                    2
                } else if scores[i] == scores[j] {
                    1
                } else {
                    0
                };
            }
        }
    }
    twice_u as f64 / (2 * p * n) as f64
}

fn distinct_desc(scores: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut t: Vec<f64> = scores.collect();
    t.sort_by(|a, b| b.total_cmp(a));
    t.dedup();
    t
}

fn ap_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in distinct_desc(scores.iter().copied()) {
        let flagged = scores.iter().filter(|&&s| s >= t).count() as f64;
        let tp = scores.iter().zip(labels).filter(|(&s, &l)| l && s >= t).count() as f64;
        let recall = tp / n_pos;
        ap += (recall - prev_recall) * (tp / flagged);
        prev_recall = recall;
    }
    ap
}

/// 8-connected component labels by breadth-first flood fill; 0 = background.
fn label_regions(mask: &Array2<bool>) -> (Array2<usize>, usize) {
    let (h, w) = mask.dim();
    let mut labels = Array2::<usize>::zeros((h, w));
    let mut next = 0;
    for r in 0..h {
        for c in 0..w {
            if !mask[[r, c]] || labels[[r, c]] != 0 {
                continue;
            }
            next += 1;
            labels[[r, c]] = next;
            let mut queue = VecDeque::from([(r, c)]);
            while let Some((y, x)) = queue.pop_front() {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if mask[[ny, nx]] && labels[[ny, nx]] == 0 {
                            labels[[ny, nx]] = next;
                            queue.push_back((ny, nx));
                        }
                    }
                }
            }
        }
    }
    (labels, next)
}

fn pro_oracle(map: &Array2<f32>, gt: &Array2<bool>, limit: f64) -> f64 {
    let (labels, n_regions) = label_regions(gt);
    let sizes: Vec<f64> = (1..=n_regions)
        .map(|k| labels.iter().filter(|&&l| l == k).count() as f64)
        .collect();
    let n_normal = gt.iter().filter(|&&g| !g).count() as f64;
    let mut points = vec![(0.0f64, 0.0f64)];
    for t in distinct_desc(map.iter().map(|&v| v as f64)) {
        let fp = map.iter().zip(gt).filter(|(&s, &g)| !g && s as f64 >= t).count() as f64;
        let overlap: f64 = (1..=n_regions)
            .map(|k| {
                map.iter()
                    .zip(labels.iter())
                    .filter(|(&s, &l)| l == k && s as f64 >= t)
                    .count() as f64
                    / sizes[k - 1]
            })
            .sum::<f64>()
            / n_regions as f64;
        points.push((fp / n_normal, overlap));
    }
    let mut area = 0.0;
    for k in 0..points.len() {
        let start = points[k].0.min(limit);
        let end = points.get(k + 1).map_or(limit, |p| p.0.min(limit));
        area += points[k].1 * (end - start).max(0.0);
    }
    area / limit
}

fn iou_oracle(p: &Array2<bool>, g: &Array2<bool>) -> f64 {
    let mut inter = 0;
    let mut union = 0;
    for (a, b) in p.iter().zip(g) {
        if *a && *b {
            inter += 1;
        }
        if *a || *b {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn noc_oracle(traces: &[Vec<f64>], target: f64, cap: usize) -> (f64, f64) {
    let mut sum = 0;
    let mut failed = 0;
    for t in traces {
        let mut n = cap;
        let mut hit = false;
        for (i, &v) in t.iter().enumerate() {
            if i >= cap {
                break;
            }
            if v >= target {
                n = i + 1;
                hit = true;
                break;
            }
        }
        sum += n;
        failed += (!hit) as usize;
    }
    (sum as f64 / traces.len() as f64, failed as f64 / traces.len() as f64)
}

fn log_uniform_len<R: Rng>(rng: &mut R, lo: usize, hi: usize) -> usize {
    let v = rng.random_range((lo as f64).ln()..(hi as f64).ln()).exp();
    (v as usize).clamp(lo, hi)
}

fn random_scores<R: Rng>(rng: &mut R, n: usize) -> (Vec<f64>, Vec<bool>) {
    let tied = rng.random_bool(0.5);
    let levels = rng.random_range(2..20);
    loop {
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
            let scores = labels
                .iter()
                .map(|&l| {
                    let base: f64 = rng.random_range(0.0..1.0) + if l { 0.3 } else { 0.0 };
                    if tied {
                        (base * levels as f64).floor() / levels as f64
                    } else {
                        base
                    }
                })
                .collect();
            return (scores, labels);
        }
    }
}

fn random_rect_mask<R: Rng>(rng: &mut R, h: usize, w: usize, rects: usize) -> Array2<bool> {
    let mut m = Array2::from_elem((h, w), false);
    for _ in 0..rects {
        let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
        let (rh, rw) = (rng.random_range(1..=h / 3 + 1), rng.random_range(1..=w / 3 + 1));
        for y in y0..(y0 + rh).min(h) {
            for x in x0..(x0 + rw).min(w) {
                m[[y, x]] = true;
            }
        }
    }
    m
}

fn criterion_metrics() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let trials = 1000;
    for trial in 0..trials {
        let n = log_uniform_len(&mut rng, 2, 10_000);
        let (scores, labels) = random_scores(&mut rng, n);
        let a = ok(auroc(&scores, &labels))?;
        let o = auroc_oracle(&scores, &labels);
        ensure!(a == o, "auroc trial {trial} (n={n}): {a} vs oracle {o}");
        let ap = ok(average_precision(&scores, &labels))?;
        let apo = ap_oracle(&scores, &labels);
        ensure!((ap - apo).abs() <= 1e-12, "AP trial {trial}: {ap} vs oracle {apo}");
    }
    for trial in 0..trials {
        let h = rng.random_range(4..=100);
        let w = rng.random_range(4..=100);
        let gt = loop {
            let rects = rng.random_range(1..4);
            let m = random_rect_mask(&mut rng, h, w, rects);
            if m.iter().any(|&v| !v) {
                break m;
            }
        };
        let levels = rng.random_range(2..64) as f32;
        let map = Array2::from_shape_fn((h, w), |(r, c)| {
            let v: f32 = rng.random_range(0.0..1.0) + if gt[[r, c]] { 0.4 } else { 0.0 };
            (v * levels).floor() / levels
        });
        let limit = [0.3, 0.05, 1.0, rng.random_range(0.01..1.0)][trial % 4];
        let p = ok(pro(map.view(), gt.view(), limit))?;
        let po = pro_oracle(&map, &gt, limit);
        ensure!((p - po).abs() <= 1e-9, "pro trial {trial} ({h}x{w}, limit {limit}): {p} vs oracle {po}");
    }
    for trial in 0..trials {
        let k = rng.random_range(1..6);
        let side = (log_uniform_len(&mut rng, 1, 10_000) as f64 / k as f64).sqrt().max(1.0) as usize;
        let preds: Vec<Array2<bool>> = (0..k).map(|_| random_rect_mask(&mut rng, side, side, 2)).collect();
        let gts: Vec<Array2<bool>> = (0..k)
            .map(|_| {
                let rects = rng.random_range(0..3);
                random_rect_mask(&mut rng, side, side, rects)
            })
            .collect();
        let pairs: Vec<_> = preds.iter().zip(&gts).map(|(p, g)| (p.view(), g.view())).collect();
        let m = ok(miou(&pairs))?;
        let mo = preds.iter().zip(&gts).map(|(p, g)| iou_oracle(p, g)).sum::<f64>() / k as f64;
        ensure!((m - mo).abs() <= 1e-12, "miou trial {trial}: {m} vs oracle {mo}");

        let n_traces = rng.random_range(1..50);
        let traces: Vec<Vec<f64>> = (0..n_traces)
            .map(|_| {
                let len = rng.random_range(1..30);
                let mut v = 0.0f64;
                (0..len)
                    .map(|_| {
                        v = (v + rng.random_range(0.0..0.2)).min(1.0);
                        v
                    })
                    .collect()
            })
            .collect();
        let cap = rng.random_range(1..25);
        let s = ok(aggregate_noc(&traces, 0.8, cap))?;
        let (mean, failed) = noc_oracle(&traces, 0.8, cap);
        ensure!(
            s.mean_noc == mean && s.fraction_failed == failed,
            "noc trial {trial}: {s:?} vs oracle ({mean}, {failed})"
        );
    }
    Ok(format!("{trials} trials each for auroc, AP, PRO, mIoU, NoC"))
}

// ---------- PosFAR ----------

fn random_bank<R: Rng>(rng: &mut R, grid: (usize, usize), dim: usize, n: usize, quantized: bool) -> ReferenceBank {
    let mut positions: Vec<(u32, u32)> = (0..grid.0 * grid.1)
        .map(|i| ((i / grid.1) as u32, (i % grid.1) as u32))
        .collect();
    while positions.len() < n {
        positions.push((rng.random_range(0..grid.0) as u32, rng.random_range(0..grid.1) as u32));
    }
    positions.shuffle(rng);
    let features = (0..positions.len() * dim)
        .map(|_| {
            if quantized {
                rng.random_range(0..3) as f32
            } else {
                rng.random_range(-1.0..1.0)
            }
        })
        .collect();
    ReferenceBank {
        category: "toy".into(),
        dim,
        grid,
        positions,
        features,
        extractor_fingerprint: "test".into(),
    }
}

fn criterion_posfar() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut max_n = 0;
    for trial in 0..60 {
        let grid = (rng.random_range(2..=10), rng.random_range(2..=10));
        let dim = rng.random_range(1..=16);
        let n = rng.random_range(grid.0 * grid.1..=1000);
        max_n = max_n.max(n);
        let quantized = trial % 3 == 0;
        let bank = random_bank(&mut rng, grid, dim, n, quantized);
        let cells = grid.0 * grid.1;
        let vectors = Array2::from_shape_fn((cells, dim), |_| {
            if quantized {
                rng.random_range(0..3) as f32
            } else {
                rng.random_range(-1.0..1.0)
            }
        });
        let pcf = ok(PcfGrid::new(vectors.clone(), grid, (grid.0 * 8, grid.1 * 8)))?;
        let radius = rng.random_range(0..=3);
        let matched = ok(match_reference(&pcf, &bank, radius))?;
        let theta = [1.0f32, 2.0, 0.5, 1.5][trial % 4];
        let posfar = ok(compute_posfar(&pcf, &matched, theta))?;
        for j in 0..cells {
            let (row, col) = (j / grid.1, j % grid.1);
            let mut best = (f64::INFINITY, usize::MAX);
            for i in 0..bank.positions.len() {
                let (pr, pc) = bank.positions[i];
                let cheb = (pr as i64 - row as i64).abs().max((pc as i64 - col as i64).abs());
                if cheb > radius as i64 {
                    continue;
                }
                let d: f64 = (0..dim)
                    .map(|k| ((vectors[[j, k]] - bank.features[i * dim + k]) as f64).powi(2))
                    .sum();
                if d < best.0 {
                    best = (d, i);
                }
            }
            let got = matched.indices[[row, col]];
            ensure!(got == best.1, "trial {trial}: cell ({row},{col}) matched {got}, oracle {}", best.1);
            for k in 0..dim {
                let expect = ((vectors[[j, k]] - bank.features[best.1 * dim + k]) as f64)
                    .abs()
                    .powf(theta as f64);
                let v = posfar.residuals[[j, k]] as f64;
                ensure!((v - expect).abs() <= 1e-6, "trial {trial}: residual {v} vs oracle {expect}");
            }
        }
    }
    // a test image identical to the single reference image
    let grid = (6, 7);
    let vectors = Array2::from_shape_fn((42, 5), |_| rng.random_range(-2.0f32..2.0));
    let bank = ReferenceBank {
        category: "toy".into(),
        dim: 5,
        grid,
        positions: (0..42).map(|i| ((i / 7) as u32, (i % 7) as u32)).collect(),
        features: vectors.iter().copied().collect(),
        extractor_fingerprint: "test".into(),
    };
    let pcf = ok(PcfGrid::new(vectors, grid, (48, 56)))?;
    let posfar = ok(compute_posfar(&pcf, &ok(match_reference(&pcf, &bank, 1))?, 2.0))?;
    ensure!(posfar.residuals.iter().all(|&v| v == 0.0), "identical features gave nonzero residual");
    Ok(format!("60 random banks up to N = {max_n}, identical-image residual all zero"))
}

// ---------- zero-init identity ----------

fn random_input(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> std::result::Result<ModelInput, String> {
    let res = cfg.resolution;
    let g = cfg.residual_grid();
    let (gh, gw) = (g, g);
    let dev = Device::Cpu;
    let mut t = |shape: &[usize]| -> std::result::Result<Tensor, String> {
        let n: usize = shape.iter().product();
        let v: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        ok(Tensor::from_vec(v, shape, &dev))
    };
    Ok(ModelInput {
        image: t(&[1, 3, res, res])?,
        clicks: t(&[1, 3, res, res])?.abs().map_err(|e| e.to_string())?,
        posfar: t(&[1, gh * gw, cfg.posfar_dim])?.abs().map_err(|e| e.to_string())?,
        grid: (gh, gw),
        text: Some(t(&[1, 6, cfg.text_dim])?),
    })
}

fn bits(t: &Tensor) -> std::result::Result<Vec<u32>, String> {
    let v: Vec<f32> = ok(t.flatten_all().and_then(|t| t.to_vec1()))?;
    Ok(v.into_iter().map(f32::to_bits).collect())
}

fn criterion_zero_init() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut compared = 0;
    for seg in [false, true] {
        let cfg = ModelConfig {
            seg_mode: seg,
            ..ModelConfig::tiny()
        };
        let model = ok(AdClickNet::new(cfg.clone()))?;
        for _ in 0..3 {
            let input = random_input(&cfg, &mut rng)?;
            let pyr = ok(model.pyramid(&input))?;
            let reference = if seg { &pyr.residual } else { &pyr.image };
            for (i, (f, r)) in pyr.fused.iter().zip(reference).enumerate() {
                ensure!(
                    bits(f)? == bits(r)?,
                    "{} mode: fused scale {} differs from the pass-through branch",
                    if seg { "seg" } else { "click" },
                    pyr.scales[i]
                );
                compared += 1;
            }
            if !seg {
                // the residual branch cannot influence the fused pyramid yet
                let mut other = input.clone();
                other.posfar = ok((&input.posfar * 3.0).and_then(|t| t + 0.5))?;
                let again = ok(model.pyramid(&other))?;
                for (a, b) in again.fused.iter().zip(&pyr.fused) {
                    ensure!(bits(a)? == bits(b)?, "perturbing the residual input changed the fused pyramid");
                }
            }
        }
    }
    Ok(format!("{compared} pyramid levels bit-identical across both modes"))
}

// ---------- aggregation ----------

fn criterion_aggregation() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for set in 0..100 {
        let k = rng.random_range(1..=6);
        let (h, w) = (rng.random_range(1..=32), rng.random_range(1..=32));
        let maps: Vec<Array2<f32>> = (0..k)
            .map(|_| Array2::from_shape_fn((h, w), |_| rng.random_range(0.0..1.0)))
            .collect();
        let agg = ok(aggregate_max(&maps))?;
        for r in 0..h {
            for c in 0..w {
                let mut m = f32::NEG_INFINITY;
                for map in &maps {
                    if map[[r, c]] > m {
                        m = map[[r, c]];
                    }
                }
                ensure!(agg[[r, c]] == m, "set {set}: pixel ({r},{c}) {} vs oracle {m}", agg[[r, c]]);
            }
        }
        let mut shuffled = maps.clone();
        shuffled.shuffle(&mut rng);
        ensure!(ok(aggregate_max(&shuffled))? == agg, "set {set}: permutation changed the aggregate");
        for map in &maps {
            ensure!(agg.iter().zip(map).all(|(a, b)| a >= b), "set {set}: aggregate below a member map");
        }
    }
    Ok("100 random map sets: oracle, permutation invariance, dominance".into())
}

// ---------- attention ----------

fn vec_of(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

/// Scalar cross-attention: r + sum_t softmax_t(LN(W_q r + b) . W_k l_t / sqrt(d)) W_v l_t.
fn attention_oracle(att: &CrossAttention, residual: &Array3<f32>, tokens: &Array2<f32>) -> Array3<f64> {
    let (h, w, d) = residual.dim();
    let (t_len, z) = tokens.dim();
    let wq = vec_of(&att.query_conv.weight);
    let bq = vec_of(&att.query_conv.bias);
    let g = vec_of(&att.query_norm.weight);
    let beta = vec_of(&att.query_norm.bias);
    let wk = vec_of(&att.w_k.weight);
    let wv = vec_of(&att.w_v.weight);
    let proj = |wm: &[f64], t: usize| -> Vec<f64> {
        (0..d)
            .map(|o| (0..z).map(|i| wm[o * z + i] * tokens[[t, i]] as f64).sum())
            .collect()
    };
    let keys: Vec<Vec<f64>> = (0..t_len).map(|t| proj(&wk, t)).collect();
    let values: Vec<Vec<f64>> = (0..t_len).map(|t| proj(&wv, t)).collect();
    let mut out = Array3::<f64>::zeros((h, w, d));
    for y in 0..h {
        for x in 0..w {
            let q: Vec<f64> = (0..d)
                .map(|o| bq[o] + (0..d).map(|i| wq[o * d + i] * residual[[y, x, i]] as f64).sum::<f64>())
                .collect();
            let mean = q.iter().sum::<f64>() / d as f64;
            let var = q.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let qn: Vec<f64> = (0..d)
                .map(|o| (q[o] - mean) / (var + att.query_norm.eps).sqrt() * g[o] + beta[o])
                .collect();
            let logits: Vec<f64> = keys
                .iter()
                .map(|k| k.iter().zip(&qn).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            for o in 0..d {
                out[[y, x, o]] =
                    residual[[y, x, o]] as f64 + (0..t_len).map(|t| e[t] / s * values[t][o]).sum::<f64>();
            }
        }
    }
    out
}

fn feature(tokens: Array2<f32>) -> LinguisticFeature {
    LinguisticFeature {
        tokens,
        source_prompt: "test".into(),
        object: "tile".into(),
        defect: "stain".into(),
    }
}

fn criterion_attention() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let (d, z) = (16, 12);
    let mut ps = ParamStore::new(3, DType::F32);
    let att = ok(CrossAttention::new(&mut ps, "attn", z, d))?;
    // non-trivial normalisation parameters
    for name in ["attn.query_norm.weight", "attn.query_norm.bias", "attn.query_conv.bias"] {
        let v: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        ok(ps.get(name).unwrap().set(&ok(Tensor::from_vec(v, d, &Device::Cpu))?))?;
    }
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let (h, w, t_len) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..8));
        let residual = Array3::from_shape_fn((h, w, d), |_| rng.random_range(-1.0f32..1.0));
        let tokens = Array2::from_shape_fn((t_len, z), |_| rng.random_range(-1.0f32..1.0));
        let fused = ok(fuse_language(&residual, &feature(tokens.clone()), &att))?;
        let oracle = attention_oracle(&att, &residual, &tokens);
        for (a, b) in fused.iter().zip(oracle.iter()) {
            worst = worst.max((*a as f64 - b).abs());
        }
        let r = ok(Tensor::from_vec(residual.iter().copied().collect::<Vec<_>>(), (1, h, w, d), &Device::Cpu)
            .and_then(|t| t.permute((0, 3, 1, 2))))?;
        let l = ok(Tensor::from_vec(tokens.iter().copied().collect::<Vec<_>>(), (1, t_len, z), &Device::Cpu))?;
        let weights = ok(att.weights(&r, &l))?;
        let sums: Vec<f32> = ok(weights.sum(2).and_then(|s| s.flatten_all()).and_then(|s| s.to_vec1()))?;
        ensure!(sums.iter().all(|s| (s - 1.0).abs() < 1e-5), "attention weights do not sum to 1: {sums:?}");
    }
    ensure!(worst <= 1e-5, "fuse_language deviates from the scalar oracle by {worst:e}");

    // one token: the added term is the same at every position
    let residual = Array3::from_shape_fn((4, 5, d), |_| rng.random_range(-1.0f32..1.0));
    let tokens = Array2::from_shape_fn((1, z), |_| rng.random_range(-1.0f32..1.0));
    let fused = ok(fuse_language(&residual, &feature(tokens), &att))?;
    let delta = &fused - &residual;
    for y in 0..4 {
        for x in 0..5 {
            for o in 0..d {
                ensure!(
                    (delta[[y, x, o]] - delta[[0, 0, o]]).abs() < 1e-6,
                    "single-token attention is not spatially constant"
                );
            }
        }
    }

    // analytic vs central finite differences in f64
    let mut ps = ParamStore::new(4, DType::F64);
    let att = ok(CrossAttention::new(&mut ps, "attn", z, d))?;
    let dev = Device::Cpu;
    let r = ok(Tensor::randn(0f64, 1.0, (1, d, 3, 4), &dev))?;
    let l = ok(Tensor::randn(0f64, 1.0, (1, 5, z), &dev))?;
    let g = ok(Tensor::randn(0f64, 1.0, (1, d, 3, 4), &dev))?;
    let loss = |a: &CrossAttention| -> f64 {
        a.forward(&r, &l)
            .and_then(|o| (o * &g)?.sum_all())
            .and_then(|s| s.to_scalar::<f64>())
            .unwrap()
    };
    let out = ok(att.forward(&r, &l).and_then(|o| (o * &g)?.sum_all()))?;
    let grads = ok(out.backward())?;
    let mut worst_rel = 0.0f64;
    let mut checked = 0;
    for name in ["attn.w_k.weight", "attn.w_v.weight"] {
        let var = ps.get(name).unwrap().clone();
        let analytic = vec_of(grads.get(var.as_tensor()).ok_or(format!("no gradient for {name}"))?);
        let base = vec_of(var.as_tensor());
        let shape = var.dims().to_vec();
        for _ in 0..12 {
            let i = rng.random_range(0..base.len());
            let eps = 1e-6;
            let probe = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, shape.as_slice(), &dev).unwrap()).unwrap();
                loss(&att)
            };
            let fd = (probe(eps) - probe(-eps)) / (2.0 * eps);
            var.set(&ok(Tensor::from_vec(base.clone(), shape.as_slice(), &dev))?).unwrap();
            let rel = (analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs()).max(1e-6);
            worst_rel = worst_rel.max(rel);
            checked += 1;
        }
    }
    ensure!(worst_rel <= 1e-4, "gradient check: worst relative error {worst_rel:e}");
    Ok(format!(
        "oracle max abs err {worst:.1e}; {checked} W_K/W_V gradient entries, worst rel err {worst_rel:.1e}"
    ))
}

// ---------- NFL ----------

fn criterion_nfl() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut worst0 = 0.0f64;
    let mut worst2 = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..=256);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.001..0.999)).collect();
        let y: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        let pt: Vec<f64> = p.iter().zip(&y).map(|(&p, &y)| if y { p } else { 1.0 - p }).collect();

        let bce = pt.iter().map(|v| -v.ln()).sum::<f64>() / n as f64;
        worst0 = worst0.max((ok(normalized_focal_loss(&p, &y, 0.0))? - bce).abs());

        let mut num = 0.0;
        let mut den = 0.0;
        for v in &pt {
            let wgt = (1.0 - v) * (1.0 - v);
            num += wgt * -v.ln();
            den += wgt;
        }
        worst2 = worst2.max((ok(normalized_focal_loss(&p, &y, 2.0))? - num / den).abs());
        let wsum: f64 = ok(nfl_weights(&p, &y, 2.0))?.iter().sum();
        ensure!((wsum - 1.0).abs() <= 1e-6, "weights sum to {wsum}");
    }
    ensure!(worst0 <= 1e-9, "gamma 0 vs mean BCE: {worst0:e}");
    ensure!(worst2 <= 1e-7, "gamma 2 vs scalar oracle: {worst2:e}");
    Ok(format!("200 instances; gamma 0 err {worst0:.1e}, gamma 2 err {worst2:.1e}"))
}

// ---------- toy end-to-end ----------

fn criterion_toy() -> Check {
    let start = Instant::now();
    let dir = ok(tempfile::tempdir())?;
    let fit = dir.path().join("fit");
    let held_out = dir.path().join("eval");
    ok(write_dataset(&fit, &SyntheticConfig {
        seed: 1,
        ..Default::default()
    }))?;
    ok(write_dataset(&held_out, &SyntheticConfig {
        seed: 2,
        test_per_defect: 5,
        ..Default::default()
    }))?;
    let cats = common::categories();
    let prepare = |engine: &adclick_core::Engine, root: &std::path::Path| -> adclick_core::Result<Vec<_>> {
        let mut out = Vec::new();
        for c in &cats {
            out.extend(prepare_samples(engine, &load_dataset(root, Layout::Mvtec, c, Split::Test)?, true)?);
        }
        Ok(out)
    };

    // (a) fixed batch, default optimiser settings
    let engine = common::untrained_engine(&fit);
    let fit_samples = ok(prepare(&engine, &fit))?;
    let fixed = ok(fixed_click_batch(&engine, &fit_samples, 4))?;
    let cfg_a = TrainConfig {
        steps: 50,
        eval_every: 1,
        ..Default::default()
    };
    let rep = ok(train(&engine.model, &mut FixedBatchSource(fixed.clone()), Some(&fixed), &cfg_a, None))?;
    let losses: Vec<f64> = rep.fixed_batch.iter().map(|(_, l)| *l).collect();
    let a_ok = losses.len() == 51 && losses.windows(2).all(|w| w[1] < w[0]);

    // (b), (c): iterative-click training, then held-out evaluation
    let mut engine = common::untrained_engine(&fit);
    let cfg = TrainConfig {
        steps: 300,
        lr: 1e-3,
        eval_every: 50,
        ..Default::default()
    };
    let mut source = ok(ClickTrainingSource::new(&engine, fit_samples, cfg.clone()))?;
    ok(train(&engine.model, &mut source, Some(&fixed), &cfg, None))?;
    drop(source);
    let spec = adclick_core::pipeline::EngineSpec::tiny();
    engine.banks = ok(build_banks(&held_out, Layout::Mvtec, &cats, &ok(spec.build_extractor())?, 1.0, 0))?;
    let eval_samples = ok(prepare(&engine, &held_out))?;
    let (row, _) = ok(evaluate_iis(&engine, "toy", &eval_samples, &[1, 2, 3, 5], &IisProtocol::default()))?;
    let miou_at = |k: usize| row.per_budget.iter().find(|(b, _)| *b == k).unwrap().1.miou;
    let b_ok = miou_at(5) >= miou_at(1);
    let reached = 1.0 - row.noc.fraction_failed;
    let c_ok = reached >= 0.8;
    println!("{}", format_iis_table(&[row.clone()]).trim_end());

    // (d) session export, then replay from the sidecar
    let engine = Arc::new(engine);
    let catalog = ok(ImageCatalog::from_dataset(&held_out, Layout::Mvtec, &cats))?;
    let mgr = SessionManager::new(Some(engine.clone()), catalog, SessionConfig::new(dir.path().join("out")));
    let sample = &eval_samples[0];
    let (cat, rest) = sample.id.split_once('/').unwrap();
    let key = sample.key.clone().unwrap_or_else(|| PromptKey::new(cat, "stain"));
    let session = ok(mgr.open_session(&sample.id, cat, &PromptChoice::Key {
        object: key.object.clone(),
        defect: key.defect.clone(),
    }))?;
    let mut pred = AnomalyMask::empty(64, 64);
    let mut first_hits_near = None;
    for t in 0..3 {
        let Some(click) = ok(simulate_next_click(&pred, sample.gt.view(), t))? else { break };
        let view = ok(mgr.submit_click(&session.session_id, click.x, click.y, click.polarity))?;
        let mask = ok(adclick_core::session::decode_mask_png(&view.mask_png))?;
        if t == 0 && click.polarity == Polarity::Positive {
            let near = (click.y.saturating_sub(3)..(click.y + 4).min(64))
                .any(|y| (click.x.saturating_sub(3)..(click.x + 4).min(64)).any(|x| mask[[y, x]]));
            first_hits_near = Some(near);
        }
        pred = AnomalyMask::new(mask.mapv(|b| b as u8 as f32), 0.5).unwrap();
    }
    let path = ok(mgr.export(&session.session_id))?;
    let side = ok(read_sidecar(&path.with_extension("json")))?;
    let exported = ok(adclick_core::imgproc::read_mask_png(&path))?;
    let d_ok = ok(replay_export(&engine, &side))? == exported && !side.clicks.is_empty();
    let _ = rest;

    let elapsed = start.elapsed();
    let detail = format!(
        "(a) fixed-batch loss {:.4} -> {:.4}, strictly decreasing at every step: {a_ok}; \
         (b) mIoU@1 {:.3}, mIoU@5 {:.3}: {b_ok}; (c) reached IoU 0.8 within {} clicks: {:.0}%: {c_ok}; \
         (d) replay bit-exact: {d_ok}; first click marks its neighbourhood: {:?}; {:.0}s",
        losses.first().unwrap_or(&f64::NAN),
        losses.last().unwrap_or(&f64::NAN),
        miou_at(1),
        miou_at(5),
        DEFAULT_NOC_CAP,
        reached * 100.0,
        first_hits_near,
        elapsed.as_secs_f64()
    );
    ensure!(a_ok && b_ok && c_ok && d_ok && elapsed.as_secs() <= 15 * 60, "{detail}");
    Ok(detail)
}

// ---------- table formats ----------

fn criterion_tables() -> Check {
    let s = IisScores {
        ap: 0.961,
        pro: 0.983,
        pixel_auroc: 0.997,
        miou: 0.811,
    };
    let row = IisRow {
        name: "mean".into(),
        per_budget: vec![(2, s.clone()), (3, s.clone()), (5, s)],
        noc: NocSummary {
            mean_noc: 5.6,
            fraction_failed: 0.0,
        },
        noc_target: 0.8,
    };
    let iis = format_iis_table(&[row]);
    let lines: Vec<&str> = iis.lines().collect();
    ensure!(
        lines[0] == "| Category | 2-click | 3-click | 5-click | NoC80 |",
        "IIS header: {}",
        lines[0]
    );
    ensure!(
        lines[2] == "| metric | AP/PRO/P-AUROC/mIoU | AP/PRO/P-AUROC/mIoU | AP/PRO/P-AUROC/mIoU | clicks |",
        "IIS metric row: {}",
        lines[2]
    );
    ensure!(
        lines[3] == "| mean | 96.1/98.3/99.7/81.1 | 96.1/98.3/99.7/81.1 | 96.1/98.3/99.7/81.1 | 5.6 |",
        "IIS data row: {}",
        lines[3]
    );
    let ad = format_ad_table(&[AdRow {
        name: "mean".into(),
        scores: AdScores {
            ap: 0.8,
            pro: 0.975,
            pixel_auroc: 0.991,
            image_auroc: 0.95,
        },
    }]);
    let lines: Vec<&str> = ad.lines().collect();
    ensure!(lines[0] == "| Category | AP | PRO | P-AUROC | I-AUROC |", "AD header: {}", lines[0]);
    ensure!(lines[2] == "| mean | 80.0 | 97.5 | 99.1 | 95.0 |", "AD data row: {}", lines[2]);
    Ok("IIS table: AP/PRO/P-AUROC/mIoU at 2/3/5 clicks + NoC80; AD table: AP/PRO/P-AUROC/I-AUROC".into())
}

fn main() {
    let criteria: [(&str, fn() -> Check); 8] = [
        ("metric-oracle equivalence", criterion_metrics),
        ("posfar correctness", criterion_posfar),
        ("zero-init identity", criterion_zero_init),
        ("defect-type max aggregation", criterion_aggregation),
        ("attention contract", criterion_attention),
        ("normalized focal loss contract", criterion_nfl),
        ("toy end-to-end", criterion_toy),
        ("table formats", criterion_tables),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
