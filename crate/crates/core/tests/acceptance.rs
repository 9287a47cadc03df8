//! Acceptance suite. Each test prints one `PASS` / `FAIL` line for its
//! criterion (straight to stderr so it shows up without `--nocapture`) and
//! then asserts. Tolerances are pinned as constants next to each check.

use std::collections::HashSet;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use mkgr_core::data::{build_pretrain_template, build_reason_template, EntityId, SynthConfig};
use mkgr_core::eval::{hits_at_k, mean_rank, rank_entities, FilterIndex};
use mkgr_core::experiment::{
    build_model, build_structure, cmd_ablate, cmd_count_params, cmd_evaluate, cmd_finetune, cmd_pretrain, cmd_sweep,
    cmd_synth, cmd_train_structure, count_model_params, run_ablation, run_backbone_only, run_fused, run_sweep,
    RunConfig, Workspace, ABLATION_VARIANTS, CHECKPOINT_FILE, TABLE_FILE,
};
use mkgr_core::fusion::{
    align_loss_text, align_loss_vision, expand_structural, weighted_sum_text, weighted_sum_vision, FusionConfig,
};
use mkgr_core::structure::{
    evaluate_structure, train_structure_encoder, ModelKind, ProjectionKind, StructureEncoderConfig,
};
use mkgr_core::tensor::{finite_diff_check, GradCheckOptions, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(criterion: u32, passed: bool, detail: &str) {
    let status = if passed { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    writeln!(err, "{status} criterion {criterion}: {detail}").unwrap();
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed <= Duration::from_secs(limit_secs)
}

// ---------------------------------------------------------------- 1

fn oracle_rank(scores: &[f64], target: usize, filter: &HashSet<EntityId>) -> usize {
    // Sort candidates by descending score with the target placed after all
    // ties, then read off its 1-based position.
    let mut order: Vec<usize> = (0..scores.len())
        .filter(|&e| e == target || !filter.contains(&EntityId(e)))
        .collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then_with(|| (a == target).cmp(&(b == target)))
    });
    order.iter().position(|&e| e == target).unwrap() + 1
}

#[test]
fn criterion_1_metric_oracles() {
    const LISTS: usize = 1000;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    for _ in 0..LISTS {
        let len = rng.random_range(1..60);
        let ranks: Vec<usize> = (0..len).map(|_| rng.random_range(1..=50)).collect();
        for k in [1, 3, 10] {
            let mut hits = 0usize;
            for &r in &ranks {
                if r <= k {
                    hits += 1;
                }
            }
            if hits_at_k(&ranks, k).unwrap() != hits as f64 / len as f64 {
                mismatches += 1;
            }
        }
        let mut sum = 0u64;
        for &r in &ranks {
            sum += r as u64;
        }
        if mean_rank(&ranks).unwrap() != sum as f64 / len as f64 {
            mismatches += 1;
        }
    }
    for _ in 0..LISTS {
        let n = rng.random_range(1..=50);
        // Small integer scores force plenty of ties.
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64).collect();
        let target = rng.random_range(0..n);
        let filter: HashSet<EntityId> = (0..n).filter(|_| rng.random_bool(0.2)).map(EntityId).collect();
        let empty = HashSet::new();
        if rank_entities(&scores, EntityId(target), None) != oracle_rank(&scores, target, &empty)
            || rank_entities(&scores, EntityId(target), Some(&filter)) != oracle_rank(&scores, target, &filter)
        {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    let passed = mismatches == 0 && within(elapsed, 10);
    report(
        1,
        passed,
        &format!("{mismatches} mismatches over {LISTS} rank lists and {LISTS} score vectors, {elapsed:.2?}"),
    );
    assert!(passed);
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_2_fusion_math() {
    const TOL: f64 = 1e-9;
    let x = Tensor::row(vec![0.3, -1.2, 2.5, 0.7]);
    let parallel = align_loss_text(&x, &x.scale(2.5)).unwrap();
    let orthogonal = align_loss_text(&x, &Tensor::row(vec![1.2, 0.3, 0.0, 0.0])).unwrap();
    let antiparallel = align_loss_text(&x, &x.scale(-0.1)).unwrap();
    let images = 3;
    let xv = expand_structural(&x, images).unwrap();
    let vision = [
        align_loss_vision(&xv, &xv.scale(4.0)).unwrap(),
        align_loss_vision(&xv, &expand_structural(&Tensor::row(vec![1.2, 0.3, 0.0, 0.0]), images).unwrap()).unwrap(),
        align_loss_vision(&xv, &xv.scale(-3.0)).unwrap(),
    ];
    let mut ok = (parallel - 0.0).abs() < TOL && (orthogonal - 2.0).abs() < TOL && (antiparallel - 4.0).abs() < TOL;
    ok &= (vision[0] - 0.0).abs() < TOL && (vision[1] - 2.0).abs() < TOL && (vision[2] - 4.0).abs() < TOL;

    // Hand arithmetic on values exactly representable in binary.
    let h_t = Tensor::row(vec![1.0, -2.0, 0.5, 4.0]);
    let h_s = Tensor::row(vec![0.5, 0.25, -1.0, 2.0]);
    let ws = || weighted_sum_text(&h_t, &h_s, 0.5).unwrap();
    ok &= ws().data() == [1.25, -1.875, 0.0, 5.0];
    let exp = expand_structural(&h_s, 2).unwrap();
    ok &= exp.shape() == [2, 4] && exp.data() == [0.5, 0.25, -1.0, 2.0, 0.5, 0.25, -1.0, 2.0];
    let h_v = Tensor::from_rows(&[vec![1.0, 1.0, 1.0, 1.0], vec![-1.0, 0.0, 2.0, 8.0]]).unwrap();
    let vs = || weighted_sum_vision(&h_v, &exp, 0.25).unwrap();
    ok &= vs().data() == [1.125, 1.0625, 0.75, 1.5, -0.875, 0.0625, 1.75, 8.5];
    // Reproducible to the bit across calls.
    ok &= ws().data().iter().zip(ws().data()).all(|(a, b)| a.to_bits() == b.to_bits());
    ok &= vs().data().iter().zip(vs().data()).all(|(a, b)| a.to_bits() == b.to_bits());
    report(
        2,
        ok,
        &format!(
            "L_ts = {parallel:.2e} / {orthogonal:.12} / {antiparallel:.12}, L_vs = {:.2e} / {:.12} / {:.12}",
            vision[0], vision[1], vision[2]
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- 3

fn tiny_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default().with_seed(seed);
    cfg.synth = SynthConfig {
        num_entities: 12,
        num_relations: 6,
        num_triples: 40,
        ..SynthConfig::default()
    };
    cfg.structure.epochs = 3;
    cfg.structure.dim = 4;
    cfg
}

#[test]
fn criterion_3_gradient_integrity() {
    const TOL: f64 = 1e-4;
    const SEEDS: [u64; 3] = [0, 1, 2];
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut all_passed = true;
    let mut details = Vec::new();
    for seed in SEEDS {
        let mut cfg = tiny_config(seed);
        cfg.model.dim = 8;
        cfg.model.heads = 2;
        cfg.model.ffn_dim = 12;
        cfg.model.text_layers = 2;
        cfg.model.vision_layers = 2;
        cfg.model.fusion_layers = 2;
        // Large weights so every pathway moves the loss noticeably.
        cfg.fusion = FusionConfig {
            lambda_s_ts: 0.7,
            lambda_s_vs: 0.4,
            lambda_a_ts: 0.9,
            lambda_a_vs: 0.6,
            // The last seed also exercises the trainable projection map.
            projection: if seed == 2 { ProjectionKind::Trainable } else { ProjectionKind::Orthonormal },
            ..FusionConfig::default()
        }
        .with_flags([true; 4]);
        let ws = Workspace::load(&cfg).unwrap();
        let structure = build_structure(&cfg, &ws).unwrap();
        let (model, mut store) = build_model(&cfg, &ws, Some(&structure.table)).unwrap();
        let mut queries: Vec<_> = ws.mkg.train[..2]
            .iter()
            .map(|t| build_reason_template(t.head, t.relation, Some(t.tail), &ws.mkg, &ws.vocab).unwrap())
            .collect();
        queries.push(build_pretrain_template(EntityId(3), &ws.mkg, &ws.vocab).unwrap());
        let opts = GradCheckOptions {
            tolerance: TOL,
            max_entries_per_block: 48,
            ..GradCheckOptions::default()
        };
        let result = finite_diff_check(
            &mut store,
            |s| {
                let mut total = 0.0;
                for q in &queries {
                    total += model.accumulate(s, q, &ws.mkg, 1.0)?;
                }
                Ok(total)
            },
            opts,
        )
        .unwrap();
        let blocks = result.blocks.len();
        let err = result.max_rel_error();
        worst = worst.max(err);
        all_passed &= result.passed();
        details.push(format!("seed {seed}: {err:.2e} over {blocks} blocks"));
    }
    let elapsed = start.elapsed();
    let passed = all_passed && within(elapsed, 120);
    report(
        3,
        passed,
        &format!("max relative error {worst:.2e} < {TOL:e} ({}), {elapsed:.2?}", details.join("; ")),
    );
    assert!(passed);
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_4_backbone_equivalence() {
    let mut cfg = RunConfig::default();
    cfg.train.finetune_epochs = 3;
    cfg.fusion = cfg.fusion.with_flags([false; 4]);
    let ws = Workspace::load(&cfg).unwrap();
    let fused = run_fused(&cfg, &ws, None).unwrap();
    let bare = run_backbone_only(&cfg, &ws).unwrap();
    let same_losses = fused.losses.len() == bare.losses.len()
        && fused
            .losses
            .iter()
            .zip(&bare.losses)
            .all(|(a, b)| a.loss.to_bits() == b.loss.to_bits() && a.step == b.step);
    let same_params = fused.store.len() == bare.store.len()
        && fused
            .store
            .iter()
            .zip(bare.store.iter())
            .all(|((_, a), (_, b))| a.name == b.name && a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    let same_report = fused.report == bare.report;
    let passed = same_losses && same_params && same_report;
    report(
        4,
        passed,
        &format!(
            "{} steps, losses {}, parameters {}, final metrics {} (Hits@1 {:.4})",
            fused.losses.len(),
            if same_losses { "bitwise equal" } else { "differ" },
            if same_params { "bitwise equal" } else { "differ" },
            if same_report { "equal" } else { "differ" },
            fused.report.filtered.hits1
        ),
    );
    assert!(passed);
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_5_transe_sanity() {
    const MIN_HITS10: f64 = 0.9;
    const RANDOM_BAND: (f64, f64) = (0.05, 0.4);
    let synth = SynthConfig {
        num_entities: 50,
        num_relations: 8,
        num_triples: 280,
        structure_signal: 1.0,
        ..SynthConfig::default()
    };
    let (mkg, _) = mkgr_core::data::generate_synthetic_mkg(&synth, 0).unwrap();
    let filter = FilterIndex::from_mkg(&mkg);
    let cfg = StructureEncoderConfig {
        kind: ModelKind::TransE,
        dim: 32,
        ..StructureEncoderConfig::default()
    };
    let start = Instant::now();
    let trained = train_structure_encoder(&mkg.train, mkg.num_entities(), mkg.num_relations(), &cfg).unwrap();
    let elapsed = start.elapsed();
    let test = &mkg.test;
    let learned = evaluate_structure(&trained.table, test, &filter, false).unwrap().filtered;
    let untrained_cfg = StructureEncoderConfig { epochs: 0, ..cfg };
    let untrained = train_structure_encoder(&mkg.train, mkg.num_entities(), mkg.num_relations(), &untrained_cfg).unwrap();
    let random = evaluate_structure(&untrained.table, test, &filter, false).unwrap().filtered;
    let passed = learned.hits10 >= MIN_HITS10
        && within(elapsed, 120)
        && random.hits10 >= RANDOM_BAND.0
        && random.hits10 <= RANDOM_BAND.1;
    report(
        5,
        passed,
        &format!(
            "TransE d=32 filtered Hits@10 {:.3} (>= {MIN_HITS10}) in {elapsed:.2?} on {} test triples; random embeddings Hits@10 {:.3} (expected about 0.2)",
            learned.hits10,
            test.len(),
            random.hits10
        ),
    );
    assert!(passed);
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_6_ablation_direction() {
    const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
    const MIN_WINS: usize = 4;
    let mut cfg = RunConfig::default();
    cfg.ablate.seeds = SEEDS.to_vec();
    let start = Instant::now();
    let rows = run_ablation(&cfg).unwrap();
    let elapsed = start.elapsed();
    assert_eq!(rows.len(), SEEDS.len() * ABLATION_VARIANTS.len());
    let mut wins = 0;
    let mut disabled_best = 0;
    let mut per_seed = Vec::new();
    for seed in SEEDS {
        let seed_rows: Vec<_> = rows.iter().filter(|r| r.seed == seed).collect();
        let full = seed_rows.iter().find(|r| r.flags == [true; 4]).unwrap().filtered.hits1;
        let off = seed_rows.iter().find(|r| r.flags == [false; 4]).unwrap().filtered.hits1;
        let best_other = seed_rows
            .iter()
            .filter(|r| r.flags != [false; 4])
            .map(|r| r.filtered.hits1)
            .fold(f64::NEG_INFINITY, f64::max);
        if full >= off {
            wins += 1;
        }
        // A tie at the top counts against the disabled variant.
        if off >= best_other {
            disabled_best += 1;
        }
        per_seed.push(format!("seed {seed} full {full:.3} off {off:.3} best other {best_other:.3}"));
    }
    let means: Vec<String> = ABLATION_VARIANTS
        .iter()
        .map(|(label, flags)| {
            let h: f64 = rows.iter().filter(|r| r.flags == *flags).map(|r| r.filtered.hits1).sum();
            format!("{label} {:.3}", h / SEEDS.len() as f64)
        })
        .collect();
    per_seed.push(format!("mean Hits@1 per variant: {}", means.join(", ")));
    let passed = wins >= MIN_WINS && disabled_best * 2 < SEEDS.len() && within(elapsed, 30 * 60);
    report(
        6,
        passed,
        &format!(
            "full >= all-disabled on filtered Hits@1 in {wins}/{} seeds (need {MIN_WINS}); all-disabled best in {disabled_best}/{} seeds; {elapsed:.0?} [{}]",
            SEEDS.len(),
            SEEDS.len(),
            per_seed.join("; ")
        ),
    );
    assert!(passed);
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_7_lambda_sensitivity() {
    const MAX_SPREAD: f64 = 0.2;
    let cfg = RunConfig::default();
    let start = Instant::now();
    let (_, series) = run_sweep(&cfg).unwrap();
    let elapsed = start.elapsed();
    let spreads: Vec<(String, f64)> = series.iter().map(|s| (s.name.clone(), s.hits1_relative_spread())).collect();
    let worst = spreads.iter().map(|s| s.1).fold(0.0, f64::max);
    let passed = series.len() == 4 && worst < MAX_SPREAD && within(elapsed, 2 * 3600);
    let detail: Vec<String> = series
        .iter()
        .map(|s| {
            let pts: Vec<String> = s.points.iter().map(|(l, m)| format!("{l}:{:.3}", m.hits1)).collect();
            format!("{} spread {:.1}% [{}]", s.name, 100.0 * s.hits1_relative_spread(), pts.join(" "))
        })
        .collect();
    report(
        7,
        passed,
        &format!("max relative Hits@1 spread {:.1}% (< {:.0}%), {elapsed:.0?}; {}", 100.0 * worst, 100.0 * MAX_SPREAD, detail.join("; ")),
    );
    assert!(passed);
}

// ---------------------------------------------------------------- 8

fn metric_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut names: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n != "timing.txt" && n != "manifest.txt")
        .collect();
    names.sort();
    for n in names {
        let bytes = fs::read(dir.join(&n)).unwrap();
        out.push((n, bytes));
    }
    out
}

#[test]
fn criterion_8_rerun_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let base = {
        let mut cfg = tiny_config(3);
        cfg.synth = SynthConfig {
            num_entities: 30,
            num_relations: 12,
            num_triples: 200,
            ..SynthConfig::default()
        };
        cfg.train.finetune_epochs = 2;
        cfg.ablate.seeds = vec![3, 4];
        cfg.sweep.grid = vec![0.01, 1.0];
        cfg
    };
    let dir = |name: &str| tmp.path().join(name).to_string_lossy().into_owned();
    let with_dir = |name: &str| RunConfig {
        output_dir: dir(name),
        ..base.clone()
    };
    let table = format!("{}/{TABLE_FILE}", dir("structure"));
    let fused = |name: &str, checkpoint: Option<String>| RunConfig {
        structure_table: Some(table.clone()),
        checkpoint,
        ..with_dir(name)
    };
    let commands: Vec<(&str, Box<dyn Fn()>)> = vec![
        ("synth", Box::new(|| drop(cmd_synth(&with_dir("synth")).unwrap()))),
        ("train-structure", Box::new(|| drop(cmd_train_structure(&with_dir("structure")).unwrap()))),
        ("pretrain", Box::new(|| drop(cmd_pretrain(&fused("pretrain", None)).unwrap()))),
        (
            "finetune",
            Box::new(|| {
                let ck = format!("{}/{CHECKPOINT_FILE}", dir("pretrain"));
                drop(cmd_finetune(&fused("finetune", Some(ck))).unwrap())
            }),
        ),
        (
            "evaluate",
            Box::new(|| {
                let ck = format!("{}/{CHECKPOINT_FILE}", dir("finetune"));
                drop(cmd_evaluate(&fused("evaluate", Some(ck))).unwrap())
            }),
        ),
        ("ablate", Box::new(|| drop(cmd_ablate(&with_dir("ablate")).unwrap()))),
        ("sweep", Box::new(|| drop(cmd_sweep(&with_dir("sweep")).unwrap()))),
        ("count-params", Box::new(|| drop(cmd_count_params(&with_dir("count-params")).unwrap()))),
    ];
    let dirs = ["synth", "structure", "pretrain", "finetune", "evaluate", "ablate", "sweep", "count-params"];
    for (_, run) in &commands {
        run();
    }
    let first: Vec<_> = dirs.iter().map(|d| metric_files(Path::new(&dir(d)))).collect();
    for (_, run) in &commands {
        run();
    }
    let mut differing = Vec::new();
    let mut files = 0;
    for (d, before) in dirs.iter().zip(&first) {
        let after = metric_files(Path::new(&dir(d)));
        files += after.len();
        if &after != before {
            differing.push(d.to_string());
        }
    }
    let passed = differing.is_empty();
    report(
        8,
        passed,
        &format!(
            "{} commands rerun, {files} output files compared byte for byte, differing: {}",
            commands.len(),
            if differing.is_empty() { "none".to_string() } else { differing.join(", ") }
        ),
    );
    assert!(passed);
}

// ---------------------------------------------------------------- 9

#[test]
fn criterion_9_parameter_accounting() {
    let cfg = RunConfig::default();
    let n = cfg.synth.num_entities;
    let d = cfg.model.dim;
    let fixed = count_model_params(&cfg).unwrap();
    let f = &fixed.fused;
    let mut ok = f.fusion_trainable == 0
        && f.structure_frozen == n * d
        && f.backbone_trainable == fixed.backbone_only.backbone_trainable
        && f.total() == fixed.backbone_only.total() + n * d;

    // With a trainable projection the only extra trainable block is the map.
    let mut trainable_cfg = cfg.clone();
    trainable_cfg.fusion.projection = ProjectionKind::Trainable;
    let proj = count_model_params(&trainable_cfg).unwrap();
    let raw_width = ModelKind::Hake.row_width(cfg.structure.dim);
    ok &= proj.fused.fusion_trainable == raw_width * d
        && proj.fused.structure_frozen == n * raw_width
        && proj.fused.backbone_trainable == fixed.backbone_only.backbone_trainable;
    let text = fixed.to_text();
    ok &= text.contains("structural table frozen");
    report(
        9,
        ok,
        &format!(
            "backbone trainable {}, fusion trainable {} (fixed projection) / {} (trainable {raw_width}x{d} map, {:.2}% overhead), frozen table {}x{} = {}",
            f.backbone_trainable,
            f.fusion_trainable,
            proj.fused.fusion_trainable,
            100.0 * proj.fused.trainable_overhead(),
            n,
            d,
            f.structure_frozen
        ),
    );
    assert!(ok);
}
