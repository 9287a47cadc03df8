use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

use super::pipeline::{disabled, structure_config};
use super::{
    build_model, build_structure, count_params, evaluate_model, run_fused, train_stage, LossRow, ParamReport,
    RunConfig, Stage, Workspace,
};
use crate::backbone::Backbone;
use crate::data::{generate_synthetic_mkg, save_dataset};
use crate::error::{Error, Result};
use crate::eval::{EvalReport, Metrics};
use crate::fusion::FusionConfig;
use crate::structure::{export_table, import_table, ImportCheck, KgeModel, StructuralEmbeddingTable};
use crate::tensor::{ParamStore, Tensor};

pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const TIMING_FILE: &str = "timing.txt";
pub const TABLE_FILE: &str = "structure_table.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// What a command left behind.
#[derive(Clone, Debug)]
pub struct CommandOutput {
    pub dir: PathBuf,
    /// Produced files, relative to `dir`, in write order.
    pub files: Vec<String>,
    /// Short human-readable summary for the terminal.
    pub summary: String,
}

struct OutputDir {
    path: PathBuf,
    files: Vec<(String, String)>,
    started: Instant,
}

impl OutputDir {
    fn create(cfg: &RunConfig) -> Result<Self> {
        let path = PathBuf::from(&cfg.output_dir);
        fs::create_dir_all(&path)?;
        let mut dir = OutputDir {
            path,
            files: Vec::new(),
            started: Instant::now(),
        };
        dir.write(CONFIG_FILE, cfg.to_toml())?;
        Ok(dir)
    }

    fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        fs::write(self.join(name), contents.as_ref())?;
        self.record(name)
    }

    /// Registers a file some other writer already produced.
    fn record(&mut self, name: &str) -> Result<()> {
        let digest = Sha256::digest(fs::read(self.join(name))?);
        let hex = digest.iter().fold(String::new(), |mut s, b| {
            write!(s, "{b:02x}").unwrap();
            s
        });
        self.files.retain(|(n, _)| n != name);
        self.files.push((name.to_string(), hex));
        Ok(())
    }

    /// Writes `timing.txt` and `manifest.txt`. Timing is kept out of every
    /// other file so metric outputs stay byte-identical across reruns.
    fn finish(self, command: &str, summary: String) -> Result<CommandOutput> {
        let seconds = self.started.elapsed().as_secs_f64();
        fs::write(self.join(TIMING_FILE), format!("command = {command}\nwall_seconds = {seconds:.3}\n"))?;
        let mut manifest = format!("command {command}\n");
        for (name, hash) in &self.files {
            writeln!(manifest, "{hash}  {name}").unwrap();
        }
        writeln!(manifest, "{:64}  {TIMING_FILE}", "-").unwrap();
        fs::write(self.join(MANIFEST_FILE), manifest)?;
        let mut files: Vec<String> = self.files.into_iter().map(|(n, _)| n).collect();
        files.push(TIMING_FILE.into());
        files.push(MANIFEST_FILE.into());
        Ok(CommandOutput {
            dir: self.path,
            files,
            summary,
        })
    }
}

fn loss_csv(rows: &[LossRow]) -> String {
    let mut out = String::from("stage,epoch,step,loss\n");
    for r in rows {
        writeln!(out, "{},{},{},{}", r.stage.name(), r.epoch, r.step, r.loss).unwrap();
    }
    out
}

fn metrics_line(m: &Metrics) -> String {
    format!(
        "MR {:.2}  Hits@1 {:.4}  Hits@3 {:.4}  Hits@10 {:.4}",
        m.mean_rank, m.hits1, m.hits3, m.hits10
    )
}

/// Reads the table named by `structure_table`, or returns `None` when no
/// fusion pathway needs it.
pub fn load_structure_table(cfg: &RunConfig, ws: &Workspace) -> Result<Option<StructuralEmbeddingTable>> {
    if !cfg.fusion.any_enabled() {
        return Ok(None);
    }
    let path = cfg.structure_table.as_ref().ok_or_else(|| {
        Error::Config("a fusion pathway is enabled but `structure_table` is not set; run train-structure first".into())
    })?;
    let check = ImportCheck {
        num_entities: Some(ws.mkg.num_entities()),
        config_hash: Some(crate::config_hash(&structure_config(cfg))),
    };
    let (table, warnings) = import_table(Path::new(path), &check)?;
    for w in warnings {
        log::warn!("{w}");
    }
    Ok(Some(table))
}

/// Writes the synthetic dataset to the output directory.
pub fn cmd_synth(cfg: &RunConfig) -> Result<CommandOutput> {
    let mut out = OutputDir::create(cfg)?;
    let (mkg, _) = generate_synthetic_mkg(&cfg.synth, cfg.seed)?;
    for name in save_dataset(&out.path, &mkg)? {
        out.record(&name)?;
    }
    let mut kv = String::new();
    writeln!(kv, "entities = {}", mkg.num_entities()).unwrap();
    writeln!(kv, "relations = {}", mkg.num_relations()).unwrap();
    writeln!(kv, "train = {}", mkg.train.len()).unwrap();
    writeln!(kv, "dev = {}", mkg.dev.len()).unwrap();
    writeln!(kv, "test = {}", mkg.test.len()).unwrap();
    out.write("dataset.kv", &kv)?;
    let summary = format!(
        "{} entities, {} relations, {}/{}/{} train/dev/test triples",
        mkg.num_entities(),
        mkg.num_relations(),
        mkg.train.len(),
        mkg.dev.len(),
        mkg.test.len()
    );
    out.finish("synth", summary)
}

/// Trains the structure encoder, evaluates it, and exports the projected table.
pub fn cmd_train_structure(cfg: &RunConfig) -> Result<CommandOutput> {
    let mut out = OutputDir::create(cfg)?;
    let ws = Workspace::load(cfg)?;
    let outcome = build_structure(cfg, &ws)?;
    export_table(&outcome.table, &out.join(TABLE_FILE))?;
    out.record(TABLE_FILE)?;
    let mut losses = String::from("epoch,loss\n");
    for (e, l) in outcome.epoch_losses.iter().enumerate() {
        writeln!(losses, "{e},{l}").unwrap();
    }
    out.write("loss.csv", &losses)?;
    out.write("report.txt", outcome.report.to_text())?;
    out.write("metrics.kv", outcome.report.to_kv())?;
    let p = &outcome.projection;
    out.write(
        "projection.kv",
        format!(
            "identity = {}\ngram_deviation = {}\npairs_checked = {}\n",
            p.identity, p.gram_deviation, p.pairs_checked
        ),
    )?;
    let summary = format!(
        "{} table {}x{}; filtered {}",
        cfg.structure.kind,
        outcome.table.num_entities(),
        outcome.table.dim(),
        metrics_line(&outcome.report.filtered)
    );
    out.finish("train-structure", summary)
}

fn load_checkpoint_into(cfg: &RunConfig, store: &mut ParamStore) -> Result<()> {
    if let Some(path) = &cfg.checkpoint {
        let saved = ParamStore::load(Path::new(path))?;
        store.load_values_from(&saved)?;
    }
    Ok(())
}

fn cmd_train(cfg: &RunConfig, stage: Stage) -> Result<CommandOutput> {
    let mut out = OutputDir::create(cfg)?;
    let ws = Workspace::load(cfg)?;
    let table = load_structure_table(cfg, &ws)?;
    let (model, mut store) = build_model(cfg, &ws, table.as_ref())?;
    load_checkpoint_into(cfg, &mut store)?;
    let mut losses = Vec::new();
    train_stage(cfg, &ws, &model, &mut store, stage, &mut losses)?;
    store.save(&out.join(CHECKPOINT_FILE))?;
    out.record(CHECKPOINT_FILE)?;
    out.write("loss.csv", loss_csv(&losses))?;
    let summary = match losses.last() {
        Some(last) => format!("{} steps, final loss {:.4}", losses.len(), last.loss),
        None => "no training steps; checkpoint holds the initial parameters".into(),
    };
    out.finish(stage.name(), summary)
}

/// Masked-entity pretraining from scratch, or from `checkpoint` if set.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<CommandOutput> {
    cmd_train(cfg, Stage::Pretrain)
}

/// Link-prediction finetuning, typically from a pretraining checkpoint.
pub fn cmd_finetune(cfg: &RunConfig) -> Result<CommandOutput> {
    cmd_train(cfg, Stage::Finetune)
}

/// Ranks every entity for each query of the evaluation split.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<CommandOutput> {
    if cfg.checkpoint.is_none() {
        return Err(Error::Config("evaluate needs `checkpoint`".into()));
    }
    let mut out = OutputDir::create(cfg)?;
    let ws = Workspace::load(cfg)?;
    let table = load_structure_table(cfg, &ws)?;
    let (model, mut store) = build_model(cfg, &ws, table.as_ref())?;
    load_checkpoint_into(cfg, &mut store)?;
    let report = evaluate_model(cfg, &ws, &model, &store)?;
    out.write("report.txt", report.to_text())?;
    out.write("metrics.kv", report.to_kv())?;
    out.write("ranks.csv", report.ranks_csv())?;
    out.finish("evaluate", format!("filtered {}", metrics_line(&report.filtered)))
}

/// The ten flag subsets of the ablation table, as `(label, [ws_ts, ws_vs, ac_ts, ac_vs])`.
pub const ABLATION_VARIANTS: [(&str, [bool; 4]); 10] = [
    ("full", [true, true, true, true]),
    ("-WS_ts", [false, true, true, true]),
    ("-WS_vs", [true, false, true, true]),
    ("-AC_ts", [true, true, false, true]),
    ("-AC_vs", [true, true, true, false]),
    ("-(WS_ts&WS_vs)", [false, false, true, true]),
    ("-(AC_ts&AC_vs)", [true, true, false, false]),
    ("-(WS_ts&AC_ts)", [false, true, false, true]),
    ("-(WS_vs&AC_vs)", [true, false, true, false]),
    ("-all", [false, false, false, false]),
];

/// Label for an arbitrary flag subset: `full`, `-all`, or the removed switches.
pub fn variant_label(flags: [bool; 4]) -> String {
    if let Some((label, _)) = ABLATION_VARIANTS.iter().find(|(_, f)| *f == flags) {
        return label.to_string();
    }
    let names = ["WS_ts", "WS_vs", "AC_ts", "AC_vs"];
    let removed: Vec<&str> = names.iter().zip(flags).filter(|(_, on)| !on).map(|(n, _)| *n).collect();
    format!("-({})", removed.join("&"))
}

fn variant_flags(all_subsets: bool) -> Vec<[bool; 4]> {
    if all_subsets {
        (0..16u8)
            .rev()
            .map(|bits| [bits & 8 != 0, bits & 4 != 0, bits & 2 != 0, bits & 1 != 0])
            .collect()
    } else {
        ABLATION_VARIANTS.iter().map(|(_, f)| *f).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub flags: [bool; 4],
    pub seed: u64,
    pub filtered: Metrics,
    pub raw: Metrics,
}

pub struct AblationOutput {
    pub output: CommandOutput,
    pub rows: Vec<AblationRow>,
}

fn seeds_of(cfg: &RunConfig) -> Vec<u64> {
    if cfg.ablate.seeds.is_empty() {
        vec![cfg.seed]
    } else {
        cfg.ablate.seeds.clone()
    }
}

/// Trains and evaluates each flag subset for every seed. Each seed gets its
/// own dataset draw and structure table, shared by all of its variants.
pub fn run_ablation(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for seed in seeds_of(cfg) {
        let seed_cfg = cfg.with_seed(seed);
        let ws = Workspace::load(&seed_cfg)?;
        let structure = build_structure(&seed_cfg, &ws)?;
        for flags in variant_flags(cfg.ablate.all_subsets) {
            let fusion = if flags == [false; 4] {
                disabled(&cfg.fusion)
            } else {
                cfg.fusion.with_flags(flags)
            };
            let run_cfg = seed_cfg.with_fusion(fusion);
            let outcome = run_fused(&run_cfg, &ws, Some(&structure.table))?;
            let label = variant_label(flags);
            log::info!("seed {seed} {label}: filtered {}", metrics_line(&outcome.report.filtered));
            rows.push(AblationRow {
                variant: label,
                flags,
                seed,
                filtered: outcome.report.filtered,
                raw: outcome.report.raw,
            });
        }
    }
    Ok(rows)
}

fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(
        "variant,seed,ws_ts,ws_vs,ac_ts,ac_vs,filtered_mr,filtered_hits1,filtered_hits3,filtered_hits10,raw_mr,raw_hits1,raw_hits3,raw_hits10\n",
    );
    for r in rows {
        let [a, b, c, d] = r.flags.map(u8::from);
        let (f, w) = (&r.filtered, &r.raw);
        writeln!(
            out,
            "{},{},{a},{b},{c},{d},{},{},{},{},{},{},{},{}",
            r.variant, r.seed, f.mean_rank, f.hits1, f.hits3, f.hits10, w.mean_rank, w.hits1, w.hits3, w.hits10
        )
        .unwrap();
    }
    out
}

/// Mean filtered metrics per variant over seeds, in percent like the
/// published ablation table.
fn ablation_table(rows: &[AblationRow]) -> String {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<&Metrics>> = HashMap::new();
    for r in rows {
        if !groups.contains_key(r.variant.as_str()) {
            order.push(&r.variant);
        }
        groups.entry(&r.variant).or_default().push(&r.filtered);
    }
    let width = order.iter().map(|v| v.len()).max().unwrap_or(5).max(5);
    let mut out = format!("{:<width$}  {:>8}  {:>7}  {:>7}  {:>7}\n", "Model", "MR", "Hits@1", "Hits@3", "Hits@10");
    for v in order {
        let ms = &groups[v];
        let n = ms.len() as f64;
        let mean = |f: fn(&Metrics) -> f64| ms.iter().map(|m| f(m)).sum::<f64>() / n;
        writeln!(
            out,
            "{v:<width$}  {:>8.2}  {:>7.2}  {:>7.2}  {:>7.2}",
            mean(|m| m.mean_rank),
            100.0 * mean(|m| m.hits1),
            100.0 * mean(|m| m.hits3),
            100.0 * mean(|m| m.hits10)
        )
        .unwrap();
    }
    out
}

/// Runs the ablation matrix and writes `ablation.csv` (one row per variant
/// and seed) and `ablation.txt` (seed means).
pub fn cmd_ablate(cfg: &RunConfig) -> Result<AblationOutput> {
    let mut out = OutputDir::create(cfg)?;
    let rows = run_ablation(cfg)?;
    out.write("ablation.csv", ablation_csv(&rows))?;
    let table = ablation_table(&rows);
    out.write("ablation.txt", &table)?;
    let output = out.finish("ablate", table)?;
    Ok(AblationOutput { output, rows })
}

fn lambdas_of(f: &FusionConfig) -> [f64; 4] {
    [f.lambda_s_ts, f.lambda_s_vs, f.lambda_a_ts, f.lambda_a_vs]
}

fn set_lambda(f: &FusionConfig, name: &str, value: f64) -> Result<FusionConfig> {
    let mut f = f.clone();
    match name {
        "lambda_s_ts" => f.lambda_s_ts = value,
        "lambda_s_vs" => f.lambda_s_vs = value,
        "lambda_a_ts" => f.lambda_a_ts = value,
        "lambda_a_vs" => f.lambda_a_vs = value,
        _ => return Err(Error::Config(format!("unknown sweep weight `{name}`"))),
    }
    Ok(f)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    /// `[λ_s^ts, λ_s^vs, λ_a^ts, λ_a^vs]`
    pub lambdas: [f64; 4],
    pub filtered: Metrics,
}

/// One weight's grid with the results at each value.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepSeries {
    pub name: String,
    pub points: Vec<(f64, Metrics)>,
}

impl SweepSeries {
    /// `(best − worst) / best` of filtered Hits@1 over the grid.
    pub fn hits1_relative_spread(&self) -> f64 {
        let h: Vec<f64> = self.points.iter().map(|(_, m)| m.hits1).collect();
        let best = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let worst = h.iter().copied().fold(f64::INFINITY, f64::min);
        if best > 0.0 {
            (best - worst) / best
        } else {
            0.0
        }
    }
}

pub struct SweepOutput {
    pub output: CommandOutput,
    /// Distinct grid points in run order.
    pub rows: Vec<SweepRow>,
    pub series: Vec<SweepSeries>,
}

fn mean_metrics(all: &[Metrics]) -> Metrics {
    let n = all.len() as f64;
    let avg = |f: fn(&Metrics) -> f64| all.iter().map(f).sum::<f64>() / n;
    Metrics {
        mean_rank: avg(|m| m.mean_rank),
        hits1: avg(|m| m.hits1),
        hits3: avg(|m| m.hits3),
        hits10: avg(|m| m.hits10),
    }
}

/// One-at-a-time sweep: each named weight takes every grid value while the
/// others keep their configured values. Every distinct point is trained
/// `sweep.runs` times (seeds `seed`, `seed + 1`, ...) and the filtered
/// metrics are averaged.
pub fn run_sweep(cfg: &RunConfig) -> Result<(Vec<SweepRow>, Vec<SweepSeries>)> {
    let base = cfg.fusion.clone();
    let mut keys: Vec<[f64; 4]> = Vec::new();
    let mut plan = Vec::new();
    for name in &cfg.sweep.lambdas {
        let mut idx = Vec::new();
        for &value in &cfg.sweep.grid {
            let key = lambdas_of(&set_lambda(&base, name, value)?);
            let pos = match keys.iter().position(|k| k.map(f64::to_bits) == key.map(f64::to_bits)) {
                Some(p) => p,
                None => {
                    keys.push(key);
                    keys.len() - 1
                }
            };
            idx.push((value, pos));
        }
        plan.push((name.clone(), idx));
    }

    let mut results: Vec<Vec<Metrics>> = vec![Vec::new(); keys.len()];
    for run in 0..cfg.sweep.runs as u64 {
        let seed_cfg = cfg.with_seed(cfg.seed.wrapping_add(run));
        let ws = Workspace::load(&seed_cfg)?;
        let structure = if base.any_enabled() { Some(build_structure(&seed_cfg, &ws)?) } else { None };
        for (key, out) in keys.iter().zip(results.iter_mut()) {
            let fusion = FusionConfig {
                lambda_s_ts: key[0],
                lambda_s_vs: key[1],
                lambda_a_ts: key[2],
                lambda_a_vs: key[3],
                ..base.clone()
            };
            let outcome = run_fused(&seed_cfg.with_fusion(fusion), &ws, structure.as_ref().map(|s| &s.table))?;
            log::info!("seed {} lambdas {key:?}: filtered {}", seed_cfg.seed, metrics_line(&outcome.report.filtered));
            out.push(outcome.report.filtered);
        }
    }

    let rows: Vec<SweepRow> = keys
        .iter()
        .zip(&results)
        .map(|(k, m)| SweepRow {
            lambdas: *k,
            filtered: mean_metrics(m),
        })
        .collect();
    let series = plan
        .into_iter()
        .map(|(name, idx)| SweepSeries {
            name,
            points: idx.into_iter().map(|(v, p)| (v, rows[p].filtered)).collect(),
        })
        .collect();
    Ok((rows, series))
}

/// Runs the sweep and writes `sweep.csv` (one row per distinct point) and
/// `sweep_series.txt` (per-weight curves with their Hits@1 spread).
pub fn cmd_sweep(cfg: &RunConfig) -> Result<SweepOutput> {
    let mut out = OutputDir::create(cfg)?;
    let (rows, series) = run_sweep(cfg)?;
    let mut csv = String::from("lambda_s_ts,lambda_s_vs,lambda_a_ts,lambda_a_vs,hits1,hits10,hits3,mr\n");
    for r in &rows {
        let [a, b, c, d] = r.lambdas;
        let m = &r.filtered;
        writeln!(csv, "{a},{b},{c},{d},{},{},{},{}", m.hits1, m.hits10, m.hits3, m.mean_rank).unwrap();
    }
    out.write("sweep.csv", &csv)?;
    let mut text = String::new();
    for s in &series {
        writeln!(text, "# {}  hits1_relative_spread = {:.4}", s.name, s.hits1_relative_spread()).unwrap();
        writeln!(text, "value hits1 hits10").unwrap();
        for (v, m) in &s.points {
            writeln!(text, "{v} {} {}", m.hits1, m.hits10).unwrap();
        }
        writeln!(text).unwrap();
    }
    out.write("sweep_series.txt", &text)?;
    let output = out.finish("sweep", text)?;
    Ok(SweepOutput { output, rows, series })
}

/// Parameter counts of the configured model, plus the bare backbone for
/// comparison.
pub struct ParamCounts {
    pub fused: ParamReport,
    pub backbone_only: ParamReport,
}

impl ParamCounts {
    pub fn to_text(&self) -> String {
        let mut out = self.fused.to_text();
        writeln!(out).unwrap();
        writeln!(out, "backbone-only total      {}", self.backbone_only.total()).unwrap();
        writeln!(
            out,
            "difference               {}",
            self.fused.total() as i64 - self.backbone_only.total() as i64
        )
        .unwrap();
        out
    }
}

/// Counts parameters without training. When fusion is enabled and no table
/// file is configured, a zero table of the right shape stands in: only
/// shapes matter here.
pub fn count_model_params(cfg: &RunConfig) -> Result<ParamCounts> {
    let ws = Workspace::load(cfg)?;
    let table = if !cfg.fusion.any_enabled() {
        None
    } else if cfg.structure_table.is_some() {
        load_structure_table(cfg, &ws)?
    } else {
        let n = ws.mkg.num_entities();
        let raw = cfg.structure.kind.row_width(cfg.structure.dim);
        let model = KgeModel {
            kind: cfg.structure.kind,
            dim: cfg.structure.dim,
            phase_weight: cfg.structure.phase_weight,
            entities: Tensor::zeros(n, raw),
            relations: Tensor::zeros(ws.mkg.num_relations(), raw),
        };
        let table = StructuralEmbeddingTable::from_model(model, &structure_config(cfg));
        Some(crate::structure::project_to_dim(&table, cfg.model.dim, cfg.seed)?.0)
    };
    let (_, fused_store) = build_model(cfg, &ws, table.as_ref())?;
    let mut bare = ParamStore::new();
    Backbone::new(cfg.model.clone().with_data(&ws.vocab, &ws.mkg)?, &mut bare, cfg.seed)?;
    Ok(ParamCounts {
        fused: count_params(&fused_store),
        backbone_only: count_params(&bare),
    })
}

pub fn cmd_count_params(cfg: &RunConfig) -> Result<CommandOutput> {
    let mut out = OutputDir::create(cfg)?;
    let counts = count_model_params(cfg)?;
    let text = counts.to_text();
    out.write("params.txt", &text)?;
    let mut kv = counts.fused.to_kv();
    writeln!(kv, "backbone_only_total = {}", counts.backbone_only.total()).unwrap();
    out.write("params.kv", &kv)?;
    out.finish("count-params", text)
}

/// Evaluation report plus the loss rows of a full pretrain and finetune run,
/// for callers that want both without touching the filesystem.
pub fn run_pipeline(cfg: &RunConfig) -> Result<(EvalReport, Vec<LossRow>)> {
    let ws = Workspace::load(cfg)?;
    let table = if cfg.fusion.any_enabled() {
        Some(build_structure(cfg, &ws)?.table)
    } else {
        None
    };
    let outcome = run_fused(cfg, &ws, table.as_ref())?;
    Ok((outcome.report, outcome.losses))
}
