//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Set `ADASCAN_ACCEPTANCE_RUN` to the root of a finished `adascan all` run
//! to score that run instead of training from scratch. Failing criteria are
//! reported without failing `cargo test` unless `ADASCAN_ACCEPTANCE_STRICT`
//! is set, in which case the process exits with status 1.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use adascan::config::RunConfig;
use adascan::energy::EnergyModel;
use adascan::eval::Protocol;
use adascan::gradsuite;
use adascan::run::{evaluate, level_tag, run_all, PipelineReport};
use adascan_core::boxes::{ActorBox, ActorClass};
use adascan_core::detector::matching::{assignment_cost, hungarian};
use adascan_core::geometry::{self, Vec3};
use adascan_core::losses::{cvar_value, mask_loss, FocalParams};
use adascan_core::maskgen::{gumbel_noise, gumbel_softmax_values, FULL, SPARSE};
use adascan_core::predictor::{attention_map, cost_matrix, guided_mask};
use adascan_core::rangeimage::{build_range_image, project_point, BeamGrid, BeamPattern, GuidanceMask};
use adascan_core::scenesim::{generate_scenario, ground_truth_boxes, raycast_scan, ScenarioConfig};
use adascan_core::voxelizer::{voxelize, VoxelGridConfig};
use numkernel::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_INSTANCES: usize = 20;
const GRAD_SECONDS: f64 = 300.0;
const ORACLE_TOL: f64 = 1e-12;
const GUMBEL_DRAWS: usize = 100_000;
const GUMBEL_FREQ_TOL: f64 = 0.01;
const SUM_TOL: f64 = 1e-12;
const ONE_HOT_TOL: f64 = 1e-9;
const CVAR_EXAMPLE_TOL: f64 = 1e-12;
const ROUND_TRIP_POINTS: usize = 100_000;
const MIN_SPARSITY: f64 = 0.60;
const RANDOM_MARGIN: f64 = 0.05;
const FULL_MARGIN: f64 = 0.05;
const MIN_OPERATING_POINTS: usize = 3;
const PIPELINE_SECONDS: f64 = 1800.0;
const ENERGY_TOL: f64 = 1e-12;

struct Outcome {
    failures: usize,
}

impl Outcome {
    fn report(&mut self, id: &str, pass: bool, detail: String) {
        if !pass {
            self.failures += 1;
        }
        println!("{} [{id}] {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

fn gradients(out: &mut Outcome) {
    match gradsuite::run(GRAD_INSTANCES, 20_240_601) {
        Ok(r) => {
            let redraws: usize = r.entries.iter().map(|e| e.kink_redraws).sum();
            let worst = r.worst().map(|e| format!("{}/{} {:.2e}", e.group, e.name, e.max_rel_error)).unwrap_or_default();
            out.report(
                "1 gradients",
                r.passed() && r.seconds <= GRAD_SECONDS,
                format!(
                    "{} checks, worst {worst} (tol {:.0e}), {redraws} kinked draws replaced, {:.1}s (limit {GRAD_SECONDS}s)",
                    r.entries.len(),
                    r.tolerance,
                    r.seconds
                ),
            );
        }
        Err(e) => out.report("1 gradients", false, format!("error: {e}")),
    }
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn oracle_voxelize(rng: &mut ChaCha8Rng) -> f64 {
    let c = VoxelGridConfig { min: [-4.0, -4.0, -1.0], max: [4.0, 4.0, 1.0], voxel_size: [1.0, 1.0, 0.5], k_v: 3, d_p: 4 };
    let pts: Vec<f64> =
        (0..4000).flat_map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-1.5..1.5), rng.gen::<f64>()]).collect();
    let vt = voxelize(&pts, &c).unwrap();
    let dims = c.dims();
    let mut groups: BTreeMap<[usize; 3], Vec<&[f64]>> = BTreeMap::new();
    for p in pts.chunks_exact(4) {
        let idx: Vec<f64> = (0..3).map(|a| ((p[a] - c.min[a]) / c.voxel_size[a]).floor()).collect();
        if (0..3).all(|a| idx[a] >= 0.0 && (idx[a] as usize) < dims[a]) {
            groups.entry([idx[0] as usize, idx[1] as usize, idx[2] as usize]).or_default().push(p);
        }
    }
    if groups.len() != vt.m_v() {
        return f64::INFINITY;
    }
    let mut expect = vec![0.0; vt.features.len()];
    for (m, coord) in vt.coords.iter().enumerate() {
        for (s, p) in groups[coord].iter().take(c.k_v).enumerate() {
            let base = (m * c.k_v + s) * 4;
            expect[base..base + 4].copy_from_slice(p);
        }
    }
    max_abs(&vt.features, &expect)
}

fn points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
    (0..n).map(|_| [rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0), rng.gen_range(-1.0..1.0)]).collect()
}

fn oracle_cost(rng: &mut ChaCha8Rng) -> f64 {
    let (a, b) = (points(rng, 16), points(rng, 16));
    let o = cost_matrix(&a, &b);
    let expect: Vec<f64> = a
        .iter()
        .flat_map(|p| b.iter().map(move |q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()))
        .collect();
    max_abs(o.data(), &expect)
}

fn random_classes(rng: &mut ChaCha8Rng, n: usize) -> Vec<Option<ActorClass>> {
    (0..n).map(|_| [None, Some(ActorClass::Car), Some(ActorClass::Pedestrian), Some(ActorClass::Cyclist)][rng.gen_range(0..4)]).collect()
}

fn oracle_guided(rng: &mut ChaCha8Rng) -> f64 {
    let (n, m) = (12, 10);
    let o: Vec<f64> = (0..n * m).map(|_| rng.gen_range(0.0..4.0)).collect();
    let (sp, sn) = (random_classes(rng, m), random_classes(rng, n));
    let g = guided_mask(&Tensor::new(&[n, m], o.clone()).unwrap(), &sp, &sn, 2.0, 1e8).unwrap();
    let expect: Vec<f64> =
        (0..n * m).map(|k| if sn[k / m].is_some() && sn[k / m] == sp[k % m] && o[k] <= 2.0 { 0.0 } else { 1e8 }).collect();
    max_abs(g.data(), &expect)
}

fn oracle_attention(rng: &mut ChaCha8Rng) -> f64 {
    let (n, m) = (12, 10);
    let o: Vec<f64> = (0..n * m).map(|_| rng.gen_range(0.0..4.0)).collect();
    let g: Vec<f64> = (0..n * m).map(|_| if rng.gen_bool(0.5) { 0.0 } else { 1e8 }).collect();
    let a = attention_map(&Tensor::new(&[n, m], o.clone()).unwrap(), &Tensor::new(&[n, m], g.clone()).unwrap()).unwrap();
    let mut expect = Vec::with_capacity(n * m);
    for i in 0..n {
        let l: Vec<f64> = (0..m).map(|j| if g[i * m + j] > 0.0 { -g[i * m + j] } else { -o[i * m + j] }).collect();
        let mx = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = l.iter().map(|x| (x - mx).exp()).sum();
        expect.extend(l.iter().map(|x| (x - mx).exp() / z));
    }
    max_abs(a.data(), &expect)
}

fn oracle_cvar(rng: &mut ChaCha8Rng) -> f64 {
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..64);
        let beta = rng.gen_range(0.05..1.0);
        let l: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..5.0)).collect();
        let mut s = l.clone();
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let k = (((1.0 - beta) * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
        let expect = s[k - 1] + s.iter().map(|x| (x - s[k - 1]).max(0.0)).sum::<f64>() / (beta * n as f64);
        worst = worst.max((cvar_value(&l, beta).unwrap() - expect).abs());
    }
    worst
}

fn oracle_focal(rng: &mut ChaCha8Rng) -> f64 {
    let n = 256;
    let fp = FocalParams::default();
    let z: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(-4.0..4.0)).collect();
    let target = GuidanceMask { h_b: 16, w_b: 16, values: (0..n).map(|_| rng.gen_bool(0.3)).collect() };
    let mut tape = Tape::new();
    let zv = tape.param(Tensor::new(&[n, 2], z.clone()).unwrap());
    let ls = tape.log_softmax(zv, 1).unwrap();
    let br = mask_loss(&mut tape, ls, &target, &[], fp).unwrap();
    let expect: Vec<f64> = (0..n)
        .map(|b| {
            let p = 1.0 / (1.0 + (z[2 * b + 1] - z[2 * b]).exp());
            let (py, a) = if target.values[b] { (p, fp.alpha) } else { (1.0 - p, 1.0 - fp.alpha) };
            -a * (1.0 - py).powf(fp.gamma) * py.ln()
        })
        .collect();
    max_abs(tape.value(br.per_pixel).data(), &expect)
}

fn face_hit(dir: Vec3, b: &ActorBox) -> Option<f64> {
    let o = b.to_local([0.0; 3]);
    let (s, c) = b.yaw.sin_cos();
    let d = [c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1], dir[2]];
    let half = [0.5 * b.size[0], 0.5 * b.size[1], 0.5 * b.size[2]];
    if (0..3).all(|i| o[i].abs() <= half[i]) {
        return None;
    }
    let mut best: Option<f64> = None;
    for axis in 0..3 {
        if d[axis] == 0.0 {
            continue;
        }
        for sign in [-1.0, 1.0] {
            let t = (sign * half[axis] - o[axis]) / d[axis];
            let inside = (0..3).filter(|&j| j != axis).all(|j| (o[j] + t * d[j]).abs() <= half[j] + 1e-12);
            if t > 0.0 && inside && best.map_or(true, |b| t < b) {
                best = Some(t);
            }
        }
    }
    best
}

fn oracle_raycast() -> (f64, usize) {
    let g = BeamGrid::default();
    let cfg = ScenarioConfig { frames: 2, actors_min: 6, actors_max: 8, range_noise: 0.0, ..ScenarioConfig::default() };
    let seq = generate_scenario(&cfg, &g, 77).unwrap();
    let full = BeamPattern::full(&g);
    let (mut worst, mut rays) = (0.0f64, 0);
    for k in 0..seq.frames.len() {
        let boxes = ground_truth_boxes(&seq.frames[k]);
        let cloud = raycast_scan(&seq, k, &full).unwrap();
        let mut expect = Vec::new();
        for u in 0..g.h {
            for v in 0..g.w {
                rays += 1;
                let dir = g.ray_direction(u, v);
                let mut t = if dir[2] < 0.0 { -cfg.sensor_height / dir[2] } else { f64::INFINITY };
                for b in &boxes {
                    if let Some(h) = face_hit(dir, b) {
                        t = t.min(h);
                    }
                }
                if t <= cfg.max_range {
                    expect.push(((u * g.w + v) as u32, geometry::scale(dir, t)));
                }
            }
        }
        if expect.len() != cloud.len() || expect.iter().zip(&cloud.beams).any(|(e, b)| e.0 != *b) {
            return (f64::INFINITY, rays);
        }
        for (p, e) in cloud.points.iter().zip(&expect) {
            worst = worst.max(geometry::dist(*p, e.1));
        }
    }
    (worst, rays)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    permutations(n - 1)
        .into_iter()
        .flat_map(|p| {
            (0..n).map(move |i| {
                let mut q = p.clone();
                q.insert(i, n - 1);
                q
            })
        })
        .collect()
}

fn oracle_matching(rng: &mut ChaCha8Rng) -> f64 {
    let perms = permutations(6);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let cost: Vec<f64> = (0..36).map(|_| rng.gen_range(0.0..10.0)).collect();
        let best = perms.iter().map(|p| (0..6).map(|i| cost[i * 6 + p[i]]).sum::<f64>()).fold(f64::INFINITY, f64::min);
        worst = worst.max((assignment_cost(&cost, 6, &hungarian(&cost, 6, 6)) - best).abs());
    }
    worst
}

fn oracles(out: &mut Outcome) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (ray_err, rays) = oracle_raycast();
    let results = [
        ("voxelize", oracle_voxelize(&mut rng)),
        ("cost_matrix", oracle_cost(&mut rng)),
        ("guided_mask", oracle_guided(&mut rng)),
        ("attention_map", oracle_attention(&mut rng)),
        ("cvar x1000", oracle_cvar(&mut rng)),
        ("focal", oracle_focal(&mut rng)),
        ("raycast", ray_err),
        ("matching 6x6", oracle_matching(&mut rng)),
    ];
    let pass = results.iter().all(|r| r.1 <= ORACLE_TOL) && rays >= 10_000;
    let detail: Vec<String> = results.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    out.report("2 oracles", pass, format!("{} ({rays} rays; tol {ORACLE_TOL:.0e})", detail.join(", ")));
}

fn gumbel(out: &mut Outcome) {
    let logits = [[0.0, 0.0], [1.0, 0.0], [-0.7, 0.4], [2.5, -1.0]];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut freq_err: f64 = 0.0;
    let mut sum_err: f64 = 0.0;
    for z in logits {
        let zs: Vec<f64> = (0..GUMBEL_DRAWS).flat_map(|_| z).collect();
        let g = gumbel_noise(zs.len(), &mut rng);
        let m = gumbel_softmax_values(&zs, 1, GUMBEL_DRAWS, 1.0, Some(&g)).unwrap();
        let p = 1.0 / (1.0 + (z[1] - z[0]).exp());
        freq_err = freq_err.max((m.full_fraction() - p).abs());
        for s in &m.soft {
            sum_err = sum_err.max((s[FULL] + s[SPARSE] - 1.0).abs());
        }
    }
    let mut hot_err: f64 = 0.0;
    for _ in 0..10_000 {
        let a = rng.gen_range(-5.0..5.0);
        let gap = rng.gen_range(1.0..10.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let m = gumbel_softmax_values(&[a + gap, a], 1, 1, 1e-3, None).unwrap();
        let want = if gap > 0.0 { [1.0, 0.0] } else { [0.0, 1.0] };
        hot_err = hot_err.max((m.soft[0][0] - want[0]).abs()).max((m.soft[0][1] - want[1]).abs());
    }
    out.report(
        "3 gumbel",
        freq_err <= GUMBEL_FREQ_TOL && sum_err <= SUM_TOL && hot_err <= ONE_HOT_TOL,
        format!("argmax freq err {freq_err:.4} (tol {GUMBEL_FREQ_TOL}), channel sum err {sum_err:.1e}, tau 1e-3 one-hot err {hot_err:.1e}"),
    );
}

fn cvar_example(out: &mut Outcome) {
    let v = cvar_value(&[0.9, 0.5, 0.3, 0.1], 0.5).unwrap();
    out.report("4 cvar example", (v - 0.7).abs() <= CVAR_EXAMPLE_TOL, format!("value {v}, expected 0.7"));
}

fn round_trip(out: &mut Outcome) {
    let g = BeamGrid::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut pts = Vec::with_capacity(ROUND_TRIP_POINTS);
    while pts.len() < ROUND_TRIP_POINTS {
        let p = [rng.gen_range(-60.0..60.0), rng.gen_range(-60.0..60.0), rng.gen_range(-15.0..8.0)];
        if g.bin_point(p).is_some() {
            pts.push(p);
        }
    }
    let img = build_range_image(&pts, &g);
    let (mut dphi, mut dtheta) = (0.0f64, 0.0f64);
    let mut seen = vec![0u32; pts.len()];
    for (k, idx) in img.point_index.iter().enumerate() {
        let (pc, tc) = g.bin_center(k / g.w, k % g.w);
        for &i in idx {
            let (_, phi, theta) = project_point(pts[i]).unwrap();
            dphi = dphi.max((phi - pc).abs());
            dtheta = dtheta.max((theta - tc).abs());
            seen[i] += 1;
        }
    }
    let partition = img.rejected.is_empty() && seen.iter().all(|&c| c == 1);
    let (hp, ht) = (0.5 * g.d_phi(), 0.5 * g.d_theta());
    out.report(
        "5 range image",
        dphi <= hp + 1e-12 && dtheta <= ht + 1e-12 && partition,
        format!("max |dphi| {dphi:.3e} <= {hp:.3e}, max |dtheta| {dtheta:.3e} <= {ht:.3e}, partition {partition}"),
    );
}

fn pipeline(cfg: &RunConfig) -> (PathBuf, PipelineReport, Option<tempfile::TempDir>) {
    if let Some(dir) = std::env::var_os("ADASCAN_ACCEPTANCE_RUN") {
        let root = PathBuf::from(dir);
        let report = serde_json::from_slice(&std::fs::read(root.join("pipeline.json")).expect("pipeline.json")).expect("report");
        println!("scoring existing run at {}", root.display());
        return (root, report, None);
    }
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = tmp.path().to_path_buf();
    let report = run_all(cfg, &root).expect("pipeline");
    (root, report, Some(tmp))
}

fn behavior(out: &mut Outcome, cfg: &RunConfig, report: &PipelineReport) {
    let c = &report.comparison;
    let full = c.row("full").map_or(f64::NAN, |r| r.recall_near);
    let mut points: Vec<(f64, f64)> = cfg
        .eval
        .operating_levels
        .iter()
        .filter_map(|&l| c.row(&format!("adaptive@{}", level_tag(l))).map(|r| (r.mean_expected_sparsity, r.recall_near)))
        .collect();
    points.sort_by(|a, b| b.0.total_cmp(&a.0));
    let sparse: Vec<&(f64, f64)> = points.iter().filter(|p| p.0 >= MIN_SPARSITY).collect();
    let mut lines = Vec::new();
    let mut pass_a = !sparse.is_empty();
    let mut pass_b = !sparse.is_empty();
    for &l in &cfg.eval.operating_levels {
        let tag = level_tag(l);
        let (Some(a), Some(r)) = (c.row(&format!("adaptive@{tag}")), c.row(&format!("random@{tag}"))) else { continue };
        if a.mean_expected_sparsity < MIN_SPARSITY {
            continue;
        }
        let ok_a = a.recall_near - r.recall_near >= RANDOM_MARGIN;
        let ok_b = full - a.recall_near <= FULL_MARGIN;
        pass_a &= ok_a;
        pass_b &= ok_b;
        lines.push(format!(
            "sparsity {:.3}: adaptive {:.4} random {:.4} full {:.4}",
            a.mean_expected_sparsity, a.recall_near, r.recall_near, full
        ));
    }
    out.report("6a beats random", pass_a, format!("margin >= {RANDOM_MARGIN}: {}", lines.join("; ")));
    out.report("6b near full scan", pass_b, format!("within {FULL_MARGIN} of full {full:.4}"));
    let monotone = points.len() >= MIN_OPERATING_POINTS && points.windows(2).all(|w| w[1].1 >= w[0].1);
    let trend: Vec<String> = points.iter().map(|p| format!("{:.3}->{:.4}", p.0, p.1)).collect();
    out.report("6c monotone", monotone, format!("sparsity->recall@2m: {}", trend.join(", ")));
    out.report(
        "6d pipeline time",
        report.seconds <= PIPELINE_SECONDS,
        format!("{:.0}s (limit {PIPELINE_SECONDS}s)", report.seconds),
    );
}

fn ablation(out: &mut Outcome, report: &PipelineReport) {
    let c = &report.comparison;
    let (Some(s3), Some(s2), Some(ab)) = (c.matched("stage3"), c.matched("stage2"), c.matched("ablation")) else {
        out.report("7 ablation", false, "matched rows missing".into());
        return;
    };
    out.report(
        "7a stage3 >= stage2",
        s3.recall_near >= s2.recall_near,
        format!("recall@2m {:.4} vs {:.4} at sparsity {:.3}/{:.3}", s3.recall_near, s2.recall_near, s3.achieved_sparsity, s2.achieved_sparsity),
    );
    out.report(
        "7b ablation degrades",
        ab.recall_near < s3.recall_near,
        format!("recall@2m {:.4} without distill/cvar vs {:.4} (sparsity {:.3})", ab.recall_near, s3.recall_near, ab.achieved_sparsity),
    );
}

fn energy(out: &mut Outcome) {
    let a = EnergyModel::hdl32e().scan_joules(0.66).unwrap();
    let b = EnergyModel::hdl64e().scan_joules(0.0).unwrap();
    out.report(
        "8 energy",
        (a - 0.204).abs() <= ENERGY_TOL && (b - 6.0).abs() <= ENERGY_TOL,
        format!("HDL-32E @0.66 = {a} J, HDL-64E @0 = {b} J"),
    );
}

fn csv_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).into_iter().flatten().flatten() {
        let p = entry.path();
        if p.extension().is_some_and(|e| e == "csv") {
            out.insert(p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap());
        }
    }
    out
}

fn determinism(out: &mut Outcome, cfg: &RunConfig, root: &Path) {
    let mut same = true;
    let mut files = 0;
    for protocol in [Protocol::NextFrame, Protocol::EntireSequence] {
        let dir = root.join("eval").join(protocol.name());
        let first = match evaluate(cfg, root, protocol, None) {
            Ok(_) => csv_bytes(&dir),
            Err(e) => return out.report("9 determinism", false, format!("eval failed: {e}")),
        };
        let second = match evaluate(cfg, root, protocol, None) {
            Ok(_) => csv_bytes(&dir),
            Err(e) => return out.report("9 determinism", false, format!("eval failed: {e}")),
        };
        files += first.len();
        same &= !first.is_empty() && first == second;
    }
    out.report("9 determinism", same, format!("{files} metric CSVs byte-identical across two eval runs: {same}"));
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let started = Instant::now();
    let mut out = Outcome { failures: 0 };
    let cfg = RunConfig::default();
    gradients(&mut out);
    oracles(&mut out);
    gumbel(&mut out);
    cvar_example(&mut out);
    round_trip(&mut out);
    let (root, report, _tmp) = pipeline(&cfg);
    behavior(&mut out, &cfg, &report);
    ablation(&mut out, &report);
    energy(&mut out);
    determinism(&mut out, &cfg, &root);
    println!("acceptance: {} failing, {:.0}s", out.failures, started.elapsed().as_secs_f64());
    if out.failures > 0 && std::env::var_os("ADASCAN_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
