//! One PASS/FAIL line per acceptance criterion. Run with `cargo test --test acceptance`.

mod common;

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use image::RgbImage;
use patchprobe::attention::{attention_gap, AttentionTriplet};
use patchprobe::harness::bench::run_bench;
use patchprobe::harness::config::BenchConfig;
use patchprobe::harness::synth::{generate_synthetic_pair, layout_dominated_triplet, SynthParams};
use patchprobe::mitigation::{score_strategy, topk_removal_score, weighted_mean_score, PatchWeights, Strategy};
use patchprobe::perturb::table::{render_table, TableStyle};
use patchprobe::perturb::{
    apply_occlusion, apply_text_replacement, dominant_background_color, make_noise_image, make_signal_image, BBox,
};
use patchprobe::similarity::{mean_pool_score, score, score_all, Direction, Mechanism};
use patchprobe::store::{PatchEmbeddingSet, SetMeta, Variant};
use rand::Rng;

const IDENTITY_TOL: f64 = 1e-9;
const ORDER_TOL: f64 = 1e-9;
const ORACLE_TOL: f64 = 1e-6;
const MAX_POOL_TOL: f64 = 1e-4;
const EXACT_TOL: f64 = 1e-9;
const TOPK_TOL: f64 = 1e-12;
const UNIFORM_TOL: f64 = 1e-9;
const ANTISYM_TOL: f64 = 1e-12;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    ensure(elapsed <= Duration::from_secs(limit_s), || format!("took {:.2?}, limit {limit_s} s", elapsed))
}

fn identity_and_bounds() -> Check {
    let start = Instant::now();
    let mut rng = common::rng(1);
    for i in 0..200 {
        let (n, d) = (rng.random_range(1..=64), rng.random_range(1..=128));
        let v = common::random_set(&mut rng, n, d, Variant::Reference);
        for dir in [Direction::AToB, Direction::Symmetric] {
            for (m, r) in score_all(&v, &v, &Mechanism::ALL, dir) {
                let s = r.map_err(|e| format!("set {i} {m}: {e}"))?;
                ensure((s.value - 1.0).abs() <= IDENTITY_TOL, || format!("set {i} {m}: self score {}", s.value))?;
            }
        }
    }
    for i in 0..1000 {
        let (n, d) = (rng.random_range(1..=64), rng.random_range(1..=128));
        let (a, b) = common::random_pair(&mut rng, n, d);
        let s: BTreeMap<Mechanism, f64> = score_all(&a, &b, &Mechanism::ALL, Direction::AToB)
            .into_iter()
            .map(|(m, r)| r.map(|s| (m, s.value)).map_err(|e| format!("pair {i} {m}: {e}")))
            .collect::<Result<_, _>>()?;
        ensure(s.values().all(|v| (-1.0..=1.0).contains(v)), || format!("pair {i}: out of range {s:?}"))?;
        let (min, mean, maxsim) = (s[&Mechanism::MinPatch], s[&Mechanism::MeanPatch], s[&Mechanism::MaxSim]);
        ensure(min <= mean + ORDER_TOL && mean <= maxsim + ORDER_TOL, || format!("pair {i}: ordering {s:?}"))?;
    }
    within(start.elapsed(), 10)?;
    Ok(format!("200 self pairs, 1000 ordered pairs in {:.2?}", start.elapsed()))
}

fn maxsim_oracle() -> Check {
    let start = Instant::now();
    let mut rng = common::rng(2);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let (n, m, d) = (rng.random_range(1..=64), rng.random_range(1..=64), rng.random_range(1..=128));
        let a = common::random_set(&mut rng, n, d, Variant::Reference);
        let b = common::random_set(&mut rng, m, d, Variant::Counterfactual);
        let fast = score(&a, &b, Mechanism::MaxSim, Direction::AToB).map_err(|e| e.to_string())?.value;
        let err = (fast - common::brute_maxsim(&a, &b)).abs();
        worst = worst.max(err);
        ensure(err <= ORACLE_TOL, || format!("instance {i}: |kernel - brute| = {err:e}"))?;
    }
    within(start.elapsed(), 60)?;
    Ok(format!("1000 instances, max error {worst:.1e}, {:.2?}", start.elapsed()))
}

fn collapse_reproduction() -> Check {
    let (a, b) =
        generate_synthetic_pair(&SynthParams::new(100, 256, 1, FRAC_PI_2), "collapse").map_err(|e| e.to_string())?;
    let s = |m| score(&a, &b, m, Direction::AToB).map(|s| s.value).map_err(|e| e.to_string());
    let (mean, max, maxsim, meanp, minp) = (
        s(Mechanism::MeanPool)?,
        s(Mechanism::MaxPool)?,
        s(Mechanism::MaxSim)?,
        s(Mechanism::MeanPatch)?,
        s(Mechanism::MinPatch)?,
    );
    ensure(mean >= 0.9999, || format!("mean {mean}"))?;
    ensure((max - std::f64::consts::FRAC_1_SQRT_2).abs() <= MAX_POOL_TOL, || format!("max {max}"))?;
    ensure((maxsim - 1.0).abs() <= EXACT_TOL, || format!("maxsim {maxsim}"))?;
    ensure((meanp - 0.99).abs() <= EXACT_TOL, || format!("meanpatch {meanp}"))?;
    ensure(minp.abs() <= EXACT_TOL, || format!("minpatch {minp}"))?;
    Ok(format!("mean {mean:.6} max {max:.6} maxsim {maxsim:.6} meanpatch {meanp:.6} minpatch {minp:.1e}"))
}

/// Rows are coordinate permutations of one vector, so every row has the same variance.
fn permuted_rows(rng: &mut impl Rng, n: usize, d: usize, variant: Variant) -> PatchEmbeddingSet {
    use rand::seq::SliceRandom;
    let base: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let rows: Vec<Vec<f32>> = (0..n)
        .map(|_| {
            let mut r = base.clone();
            r.shuffle(rng);
            r
        })
        .collect();
    PatchEmbeddingSet::from_rows(SetMeta::new("doc", "m", variant), &rows).unwrap()
}

/// Signed one-hot rows on distinct axes: all off-diagonal cosines are 0, so every spread is equal.
fn signed_axes(rng: &mut impl Rng, d: usize, variant: Variant) -> PatchEmbeddingSet {
    let rows: Vec<Vec<f32>> = (0..d)
        .map(|i| {
            let mut r = vec![0.0f32; d];
            r[i] = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            r
        })
        .collect();
    PatchEmbeddingSet::from_rows(SetMeta::new("doc", "m", variant), &rows).unwrap()
}

fn mitigation_reductions() -> Check {
    let start = Instant::now();
    let mut rng = common::rng(4);
    for i in 0..300 {
        let (n, d) = (rng.random_range(1..=64), rng.random_range(1..=64));
        let (a, b) = common::random_pair(&mut rng, n, d);
        let mean = mean_pool_score(&a, &b).map_err(|e| e.to_string())?.value;
        let topk = topk_removal_score(&a, &b, 0).map_err(|e| e.to_string())?;
        ensure((topk - mean).abs() <= TOPK_TOL, || format!("pair {i}: TopK-R(0) {topk} vs mean {mean}"))?;
        let w = weighted_mean_score(&a, &b, &PatchWeights::uniform(n), &PatchWeights::uniform(n))
            .map_err(|e| e.to_string())?;
        ensure((w - mean).abs() <= UNIFORM_TOL, || format!("pair {i}: uniform weights {w} vs mean {mean}"))?;
    }
    for i in 0..100 {
        let (n, d) = (rng.random_range(1..=64), rng.random_range(2..=64));
        let a = permuted_rows(&mut rng, n, d, Variant::Reference);
        let b = permuted_rows(&mut rng, n, d, Variant::Counterfactual);
        let d = rng.random_range(2..=32);
        let (c, e) = (signed_axes(&mut rng, d, Variant::Reference), signed_axes(&mut rng, d, Variant::Counterfactual));
        for (strategy, x, y) in [(Strategy::VarWgt, &a, &b), (Strategy::AttnGd, &c, &e)] {
            let mean = mean_pool_score(x, y).map_err(|e| format!("set {i}: {e}"))?.value;
            let v = score_strategy(x, y, strategy, 0).map_err(|e| e.to_string())?;
            ensure((v - mean).abs() <= UNIFORM_TOL, || format!("set {i} {strategy}: {v} vs mean {mean}"))?;
        }
    }
    let (a, b) =
        generate_synthetic_pair(&SynthParams::new(100, 256, 1, FRAC_PI_2), "collapse").map_err(|e| e.to_string())?;
    let mut shown = Vec::new();
    for s in Strategy::ALL {
        let v = score_strategy(&a, &b, s, 50).map_err(|e| e.to_string())?;
        ensure(v >= 0.999, || format!("collapse {s}: {v}"))?;
        shown.push(format!("{} {v:.5}", s.label()));
    }
    within(start.elapsed(), 10)?;
    Ok(format!("reductions hold; collapse {}", shown.join(", ")))
}

fn diff_inside(a: &RgbImage, b: &RgbImage, bbox: BBox) -> bool {
    a.enumerate_pixels().all(|(x, y, p)| bbox.contains(x, y) || b.get_pixel(x, y) == p)
}

/// Same length, one digit changed.
fn nudge_digit(rng: &mut impl Rng, text: &str) -> Option<String> {
    let digits: Vec<usize> = text.char_indices().filter(|(_, c)| c.is_ascii_digit()).map(|(i, _)| i).collect();
    let &i = digits.get(rng.random_range(0..digits.len().max(1)))?;
    let old = text.as_bytes()[i] - b'0';
    let new = (old + rng.random_range(1..10)) % 10;
    let mut s = text.to_string();
    s.replace_range(i..i + 1, &new.to_string());
    Some(s)
}

fn perturbation_exactness() -> Check {
    let start = Instant::now();
    let mut rng = common::rng(5);
    let mut renders_checked = 0;
    for i in 0..50 {
        let style = TableStyle { font_px: [7, 14, 21][i % 3], shade_rows: i % 2 == 0, ..TableStyle::default() };
        let cells = common::random_table(&mut rng);
        let orig = render_table(&cells, &style).map_err(|e| e.to_string())?;
        let r = rng.random_range(1..cells.len());
        let c = rng.random_range(1..cells[r].len());
        let bbox = orig.text_boxes[r][c];

        let occluded = apply_occlusion(&orig.image, bbox, None).map_err(|e| e.to_string())?;
        ensure(diff_inside(&orig.image, &occluded, bbox), || format!("render {i}: occlusion leaked"))?;

        let new_text = nudge_digit(&mut rng, &cells[r][c]).ok_or("cell without digits")?;
        let edited =
            apply_text_replacement(&orig.image, bbox, &new_text, style.font_px, None).map_err(|e| e.to_string())?;
        ensure(diff_inside(&orig.image, &edited, bbox), || format!("render {i}: replacement leaked"))?;
        ensure(edited != orig.image, || format!("render {i}: replacement changed nothing"))?;

        let mut cf = cells.clone();
        cf[r][c] = new_text;
        let direct = render_table(&cf, &style).map_err(|e| e.to_string())?;
        ensure(direct.image == edited, || format!("render {i}: in-place edit differs from direct render"))?;
        renders_checked += 1;

        let w = orig.image.width();
        let h = orig.image.height();
        let x = rng.random_range(0..w);
        let y = rng.random_range(0..h);
        let region = BBox::new(x, y, rng.random_range(1..=w - x), rng.random_range(1..=h - y));
        let bg = dominant_background_color(&orig.image, None);
        let signal = make_signal_image(&orig.image, region).map_err(|e| e.to_string())?;
        let noise = make_noise_image(&orig.image, region).map_err(|e| e.to_string())?;
        for (px, py, p) in orig.image.enumerate_pixels() {
            let (s, n) = (signal.get_pixel(px, py), noise.get_pixel(px, py));
            let ok = if region.contains(px, py) { s == p && *n == bg } else { *s == bg && n == p };
            ensure(ok, || format!("render {i}: signal/noise not complementary at ({px}, {py})"))?;
        }
    }
    within(start.elapsed(), 30)?;
    Ok(format!("{renders_checked} renders, 50 signal/noise boxes, {:.2?}", start.elapsed()))
}

fn attention_gap_check() -> Check {
    let fractions = [0.5, 0.7, 0.9, 0.95];
    let mut gaps = Vec::new();
    for &p in &fractions {
        let t = layout_dominated_triplet(p, 100, 8, "m", "doc").map_err(|e| e.to_string())?;
        let g = attention_gap(&t, Mechanism::MeanPool, Direction::AToB).map_err(|e| e.to_string())?;
        gaps.push(g.gap);
        for m in Mechanism::ALL {
            let g = attention_gap(&t, m, Direction::AToB).map_err(|e| e.to_string())?;
            let h = attention_gap(&t.clone().with_roles_swapped(), m, Direction::AToB).map_err(|e| e.to_string())?;
            ensure((g.gap + h.gap).abs() <= ANTISYM_TOL, || format!("p={p} {m}: swap gave {} and {}", g.gap, h.gap))?;
        }
    }
    ensure(gaps[2] > 0.0, || format!("gap at 0.9 is {}", gaps[2]))?;
    ensure(gaps.windows(2).all(|w| w[0] < w[1]), || format!("not monotone: {gaps:?}"))?;
    let mut rng = common::rng(6);
    for i in 0..200 {
        let (n, d) = (rng.random_range(1..=32), rng.random_range(1..=32));
        let t = AttentionTriplet::new(
            common::random_set(&mut rng, n, d, Variant::Reference),
            common::random_set(&mut rng, n, d, Variant::Signal),
            common::random_set(&mut rng, n, d, Variant::Noise),
        )
        .map_err(|e| e.to_string())?;
        let swapped = t.clone().with_roles_swapped();
        for m in Mechanism::ALL {
            let g = attention_gap(&t, m, Direction::Symmetric).map_err(|e| e.to_string())?.gap;
            let h = attention_gap(&swapped, m, Direction::Symmetric).map_err(|e| e.to_string())?.gap;
            ensure((g + h).abs() <= ANTISYM_TOL, || format!("random triplet {i} {m}: {g} vs {h}"))?;
        }
    }
    let shown: Vec<String> = fractions.iter().zip(&gaps).map(|(p, g)| format!("{p}:{g:.4}")).collect();
    Ok(format!("mean-pool gaps {}", shown.join(" ")))
}

fn is_fixed4(s: &str) -> bool {
    let s = s.strip_prefix('-').unwrap_or(s);
    matches!(s.split_once('.'), Some((int, frac)) if !int.is_empty() && int.bytes().all(|b| b.is_ascii_digit()) && frac.len() == 4 && frac.bytes().all(|b| b.is_ascii_digit()))
}

fn determinism() -> Check {
    let manifest_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let base = BenchConfig::load(&manifest_dir.join("configs/synthetic.toml")).map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for parallelism in [1, 8] {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let cfg = BenchConfig { out_dir: dir.path().to_path_buf(), parallelism, ..base.clone() };
        let outcome = run_bench(&cfg).map_err(|e| e.to_string())?;
        let files: BTreeMap<String, Vec<u8>> = outcome
            .written
            .iter()
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(p).unwrap()))
            .collect();
        outputs.push(files);
    }
    ensure(outputs[0] == outputs[1], || "outputs differ between parallelism 1 and 8".into())?;

    let out = &outputs[0];
    for name in ["sensitivity", "mitigation", "attention", "domain"] {
        for ext in ["csv", "md"] {
            let file = format!("{name}.{ext}");
            let want = fs::read(manifest_dir.join("tests/golden").join(&file)).map_err(|e| format!("{file}: {e}"))?;
            ensure(out.get(&file) == Some(&want), || format!("{file} does not match golden"))?;
        }
    }
    let csv = String::from_utf8(out["sensitivity.csv"].clone()).map_err(|e| e.to_string())?;
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let labels: Vec<&str> = header[2..].iter().map(|h| h.rsplit(':').next().unwrap_or_default()).collect();
    let expected = ["Mean", "Max", "MaxSim", "MeanP", "MinP"];
    ensure(labels.chunks(5).all(|c| c == expected), || format!("column order {labels:?}"))?;
    for line in lines.filter(|l| !l.starts_with('#')) {
        for v in line.split(',').skip(2) {
            ensure(is_fixed4(v), || format!("cell {v:?} is not 4-decimal fixed point"))?;
        }
    }
    Ok(format!("{} files identical at parallelism 1 and 8, goldens match", out.len()))
}

type Criterion = (&'static str, fn() -> Check);

fn main() {
    let criteria: [Criterion; 7] = [
        ("identity & bounds", identity_and_bounds),
        ("maxsim kernel oracle", maxsim_oracle),
        ("collapse reproduction", collapse_reproduction),
        ("mitigation reductions", mitigation_reductions),
        ("perturbation pixel-exactness", perturbation_exactness),
        ("attention gap", attention_gap_check),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
