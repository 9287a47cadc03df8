use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::tensor::ParamStore;

/// Element counts per module, trainable and frozen kept apart.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    /// `module -> (trainable, frozen)`, keyed by the first name segment.
    pub modules: BTreeMap<String, (usize, usize)>,
    pub backbone_trainable: usize,
    /// Trainable parameters added by fusion (the optional projection map).
    pub fusion_trainable: usize,
    /// The frozen structural table.
    pub structure_frozen: usize,
}

const BACKBONE_MODULES: [&str; 4] = ["embed", "text", "vision", "multimodal"];

pub fn count_params(store: &ParamStore) -> ParamReport {
    let mut modules: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (_, p) in store.iter() {
        let module = p.name.split('.').next().unwrap_or("").to_string();
        let entry = modules.entry(module).or_default();
        if p.trainable {
            entry.0 += p.value.len();
        } else {
            entry.1 += p.value.len();
        }
    }
    let backbone_trainable = BACKBONE_MODULES
        .iter()
        .filter_map(|m| modules.get(*m))
        .map(|c| c.0)
        .sum();
    let (fusion_trainable, structure_frozen) = modules.get("structure").copied().unwrap_or_default();
    ParamReport {
        modules,
        backbone_trainable,
        fusion_trainable,
        structure_frozen,
    }
}

impl ParamReport {
    pub fn total(&self) -> usize {
        self.modules.values().map(|(t, f)| t + f).sum()
    }

    /// Extra trainable parameters relative to the backbone.
    pub fn trainable_overhead(&self) -> f64 {
        self.fusion_trainable as f64 / self.backbone_trainable as f64
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "module        trainable     frozen").unwrap();
        for (name, (t, f)) in &self.modules {
            writeln!(out, "{name:<12} {t:>10} {f:>10}").unwrap();
        }
        writeln!(out).unwrap();
        writeln!(out, "backbone trainable       {}", self.backbone_trainable).unwrap();
        writeln!(out, "fusion trainable         {}", self.fusion_trainable).unwrap();
        writeln!(out, "structural table frozen  {}", self.structure_frozen).unwrap();
        writeln!(out, "total                    {}", self.total()).unwrap();
        writeln!(
            out,
            "trainable overhead       {:.4}%",
            100.0 * self.trainable_overhead()
        )
        .unwrap();
        out
    }

    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (name, (t, f)) in &self.modules {
            writeln!(out, "{name}.trainable = {t}").unwrap();
            writeln!(out, "{name}.frozen = {f}").unwrap();
        }
        writeln!(out, "backbone_trainable = {}", self.backbone_trainable).unwrap();
        writeln!(out, "fusion_trainable = {}", self.fusion_trainable).unwrap();
        writeln!(out, "structure_frozen = {}", self.structure_frozen).unwrap();
        writeln!(out, "total = {}", self.total()).unwrap();
        out
    }
}
