//! Class definitions, raw-label merge maps and effective-number class weights.
//!
//! A [`ClassTable`] is loaded from a TOML file listing the evaluation classes
//! in id order. Each class names the raw dataset labels merged into it; raw
//! labels listed under `ignore_raw` map to IGNORE and every other raw value is
//! rejected. OOD classes are ground-truth only: they never appear as
//! prediction columns, so they must occupy the trailing class ids.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index of an evaluation class, contiguous in `0..C`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClassId(pub u16);

impl ClassId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A merged per-point label: `None` is IGNORE.
pub type MergedLabel = Option<ClassId>;

pub const DEFAULT_BETA: f64 = 0.9;
pub const DEFAULT_UNIT_SCALE: f64 = 1e6;

/// Built-in tables shipped with the crate.
pub const SEMANTICKITTI_TOML: &str = include_str!("../config/semantickitti.toml");
pub const AUGKITTI_TOML: &str = include_str!("../config/augkitti.toml");
pub const SEMANTICPOSS_TOML: &str = include_str!("../config/semanticposs.toml");

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("raw label {raw} at index {index} has no entry in the merge map")]
    UnmappedRawLabel { raw: u16, index: usize },
    #[error("class {class} has zero points; its weight is undefined")]
    DegenerateCount { class: usize },
    #[error("beta must lie in (0, 1), got {0}")]
    InvalidBeta(f64),
    #[error("unit scale must be positive, got {0}")]
    InvalidUnitScale(f64),
    #[error("failed to parse class table: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("failed to read class table: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid class table: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleGroup {
    Large,
    Middle,
    Small,
    Ood,
}

impl fmt::Display for ScaleGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ScaleGroup::Large => "large",
            ScaleGroup::Middle => "middle",
            ScaleGroup::Small => "small",
            ScaleGroup::Ood => "ood",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDef {
    pub name: String,
    #[serde(default)]
    pub short: Option<String>,
    pub scale: ScaleGroup,
    #[serde(default)]
    pub raw: Vec<u16>,
    /// Reference training-set size in points, when known.
    #[serde(default)]
    pub train_points: Option<u64>,
    #[serde(default)]
    pub color: Option<[u8; 3]>,
}

/// On-disk layout of a class table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassTableConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_unit_scale")]
    pub unit_scale: f64,
    #[serde(default = "default_true")]
    pub normalize_weights: bool,
    #[serde(default)]
    pub ood: Vec<String>,
    #[serde(default)]
    pub ignore_raw: Vec<u16>,
    #[serde(rename = "class")]
    pub classes: Vec<ClassDef>,
}

fn default_beta() -> f64 {
    DEFAULT_BETA
}

fn default_unit_scale() -> f64 {
    DEFAULT_UNIT_SCALE
}

fn default_true() -> bool {
    true
}

const UNMAPPED: u16 = u16::MAX;
const IGNORED: u16 = u16::MAX - 1;

#[derive(Clone, Debug)]
pub struct ClassTable {
    config: ClassTableConfig,
    // raw label -> class id, IGNORED or UNMAPPED
    lookup: Vec<u16>,
    ood: BTreeSet<ClassId>,
    num_id: usize,
}

const DENSE_RAW: usize = 1 << 16;

impl ClassTable {
    pub fn from_config(config: ClassTableConfig) -> Result<Self, TaxonomyError> {
        let n = config.classes.len();
        if n < 2 {
            return Err(TaxonomyError::Invalid("at least two classes are required".into()));
        }
        if n >= IGNORED as usize {
            return Err(TaxonomyError::Invalid(format!("too many classes ({n})")));
        }
        if !(config.beta > 0.0 && config.beta < 1.0) {
            return Err(TaxonomyError::InvalidBeta(config.beta));
        }
        if !(config.unit_scale > 0.0) || !config.unit_scale.is_finite() {
            return Err(TaxonomyError::InvalidUnitScale(config.unit_scale));
        }

        let mut names = HashMap::new();
        for (i, c) in config.classes.iter().enumerate() {
            if names.insert(c.name.as_str(), i).is_some() {
                return Err(TaxonomyError::Invalid(format!("duplicate class name {:?}", c.name)));
            }
        }

        let mut lookup = vec![UNMAPPED; DENSE_RAW];
        let mut assign = |raw: u16, value: u16| -> Result<(), TaxonomyError> {
            let slot = &mut lookup[raw as usize];
            if *slot != UNMAPPED {
                return Err(TaxonomyError::Invalid(format!("raw label {raw} mapped twice")));
            }
            *slot = value;
            Ok(())
        };
        for (i, c) in config.classes.iter().enumerate() {
            for &raw in &c.raw {
                assign(raw, i as u16)?;
            }
        }
        for &raw in &config.ignore_raw {
            assign(raw, IGNORED)?;
        }

        let mut ood = BTreeSet::new();
        for name in &config.ood {
            let &i = names
                .get(name.as_str())
                .ok_or_else(|| TaxonomyError::Invalid(format!("unknown OOD class {name:?}")))?;
            ood.insert(ClassId(i as u16));
        }
        let num_id = n - ood.len();
        if num_id < 2 {
            return Err(TaxonomyError::Invalid("at least two in-distribution classes are required".into()));
        }
        // prediction columns are the ID class ids, so OOD ids must come last
        if let Some(first) = ood.iter().next() {
            if first.index() != num_id {
                return Err(TaxonomyError::Invalid(
                    "OOD classes must be listed after every in-distribution class".into(),
                ));
            }
        }

        Ok(Self { config, lookup, ood, num_id })
    }

    pub fn from_toml_str(text: &str) -> Result<Self, TaxonomyError> {
        Self::from_config(toml::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TaxonomyError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// 11-class SemanticKITTI table, every class in-distribution.
    pub fn semantickitti() -> Self {
        Self::from_toml_str(SEMANTICKITTI_TOML).expect("bundled table is valid")
    }

    /// SemanticKITTI table with people and rider held out as OOD.
    pub fn augkitti() -> Self {
        Self::from_toml_str(AUGKITTI_TOML).expect("bundled table is valid")
    }

    /// SemanticPOSS raw ids merged into the same classes.
    pub fn semanticposs() -> Self {
        Self::from_toml_str(SEMANTICPOSS_TOML).expect("bundled table is valid")
    }

    pub fn config(&self) -> &ClassTableConfig {
        &self.config
    }

    pub fn name(&self) -> &str {
        &self.config.name
    }

    pub fn beta(&self) -> f64 {
        self.config.beta
    }

    pub fn num_classes(&self) -> usize {
        self.config.classes.len()
    }

    /// Number of in-distribution classes, which is also the prediction width.
    pub fn num_id_classes(&self) -> usize {
        self.num_id
    }

    pub fn classes(&self) -> impl Iterator<Item = (ClassId, &ClassDef)> {
        self.config.classes.iter().enumerate().map(|(i, c)| (ClassId(i as u16), c))
    }

    pub fn class(&self, id: ClassId) -> &ClassDef {
        &self.config.classes[id.index()]
    }

    pub fn class_name(&self, id: ClassId) -> &str {
        &self.config.classes[id.index()].name
    }

    pub fn class_by_name(&self, name: &str) -> Option<ClassId> {
        self.config
            .classes
            .iter()
            .position(|c| c.name == name || c.short.as_deref() == Some(name))
            .map(|i| ClassId(i as u16))
    }

    pub fn is_ood(&self, id: ClassId) -> bool {
        self.ood.contains(&id)
    }

    pub fn ood_set(&self) -> &BTreeSet<ClassId> {
        &self.ood
    }

    pub fn id_classes(&self) -> impl Iterator<Item = ClassId> {
        (0..self.num_id as u16).map(ClassId)
    }

    pub fn scale_group(&self, id: ClassId) -> ScaleGroup {
        self.config.classes[id.index()].scale
    }

    /// Merge-map entry for one raw label: `None` when unmapped.
    pub fn lookup(&self, raw: u16) -> Option<MergedLabel> {
        match self.lookup[raw as usize] {
            UNMAPPED => None,
            IGNORED => Some(None),
            id => Some(Some(ClassId(id))),
        }
    }

    /// Smallest raw label merged into `class`; used when writing labels for
    /// transplanted points back into this table's raw id space.
    pub fn canonical_raw(&self, class: ClassId) -> Option<u16> {
        self.config.classes[class.index()].raw.iter().copied().min()
    }

    /// Reference training counts from the table file, if every class has one.
    pub fn train_counts(&self) -> Option<ClassCounts> {
        let counts = self
            .config
            .classes
            .iter()
            .map(|c| c.train_points)
            .collect::<Option<Vec<_>>>()?;
        Some(ClassCounts { counts, unit_scale: self.config.unit_scale })
    }
}

/// Maps raw dataset labels through the table's merge map.
pub fn merge_labels(raw: &[u16], table: &ClassTable) -> Result<Vec<MergedLabel>, TaxonomyError> {
    raw.iter()
        .enumerate()
        .map(|(index, &r)| table.lookup(r).ok_or(TaxonomyError::UnmappedRawLabel { raw: r, index }))
        .collect()
}

/// Per-class point counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub counts: Vec<u64>,
    /// Points per count unit in the weight formula.
    pub unit_scale: f64,
}

impl ClassCounts {
    pub fn new(counts: Vec<u64>) -> Self {
        Self { counts, unit_scale: DEFAULT_UNIT_SCALE }
    }

    /// Counts given in millions of points, as in published tables.
    pub fn from_millions(millions: &[f64]) -> Self {
        Self::new(millions.iter().map(|m| (m * 1e6).round() as u64).collect())
    }
}

/// Effective-number class weights `(1-β)/(1-β^n)` with `n = N_c / unit_scale`.
///
/// With `normalize` the weights are divided by `1-β`, so a class with a very
/// large count gets weight 1 and smaller classes get proportionally more.
pub fn class_weights(counts: &ClassCounts, beta: f64, normalize: bool) -> Result<Vec<f64>, TaxonomyError> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(TaxonomyError::InvalidBeta(beta));
    }
    if !(counts.unit_scale > 0.0) {
        return Err(TaxonomyError::InvalidUnitScale(counts.unit_scale));
    }
    counts
        .counts
        .iter()
        .enumerate()
        .map(|(class, &n)| {
            if n == 0 {
                return Err(TaxonomyError::DegenerateCount { class });
            }
            let effective = n as f64 / counts.unit_scale;
            // 1 - β^n without cancellation for small n
            let denom = -(effective * beta.ln()).exp_m1();
            let w = 1.0 / denom;
            Ok(if normalize { w } else { (1.0 - beta) * w })
        })
        .collect()
}

/// Weights for the table's in-distribution classes from its reference counts.
pub fn table_weights(table: &ClassTable) -> Result<Vec<f64>, TaxonomyError> {
    let counts = table
        .train_counts()
        .ok_or_else(|| TaxonomyError::Invalid("table has no train_points".into()))?;
    let id = ClassCounts {
        counts: counts.counts[..table.num_id_classes()].to_vec(),
        unit_scale: counts.unit_scale,
    };
    class_weights(&id, table.beta(), table.config.normalize_weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_table(entries: &[(u16, &str)]) -> ClassTable {
        table_with_ignore(entries, &[0])
    }

    fn table_with_ignore(entries: &[(u16, &str)], ignore_raw: &[u16]) -> ClassTable {
        let mut classes: Vec<ClassDef> = Vec::new();
        for &(raw, name) in entries {
            match classes.iter_mut().find(|c| c.name == name) {
                Some(c) => c.raw.push(raw),
                None => classes.push(ClassDef {
                    name: name.into(),
                    short: None,
                    scale: ScaleGroup::Large,
                    raw: vec![raw],
                    train_points: None,
                    color: None,
                }),
            }
        }
        if classes.len() < 2 {
            classes.push(ClassDef {
                name: "other".into(),
                short: None,
                scale: ScaleGroup::Small,
                raw: vec![],
                train_points: None,
                color: None,
            });
        }
        ClassTable::from_config(ClassTableConfig {
            name: "t".into(),
            beta: 0.9,
            unit_scale: 1e6,
            normalize_weights: true,
            ood: vec![],
            ignore_raw: ignore_raw.to_vec(),
            classes,
        })
        .unwrap()
    }

    #[test]
    fn merge_identity_map() {
        let t = small_table(&[(40, "road")]);
        assert_eq!(merge_labels(&[40, 40], &t).unwrap(), vec![Some(ClassId(0)); 2]);
    }

    #[test]
    fn merge_two_raw_into_one_class() {
        let t = small_table(&[(40, "road"), (48, "road")]);
        assert_eq!(t.lookup(48), Some(Some(ClassId(0))));
        assert_eq!(merge_labels(&[48], &t).unwrap(), vec![Some(ClassId(0))]);
        assert_eq!(t.canonical_raw(ClassId(0)), Some(40));
    }

    #[test]
    fn merge_unmapped_is_an_error() {
        let t = small_table(&[(40, "road")]);
        match merge_labels(&[99], &t) {
            Err(TaxonomyError::UnmappedRawLabel { raw: 99, index: 0 }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(merge_labels(&[0], &t).unwrap(), vec![None]);
    }

    #[test]
    fn bundled_tables_load() {
        let kitti = ClassTable::semantickitti();
        assert_eq!(kitti.num_classes(), 11);
        assert_eq!(kitti.num_id_classes(), 11);
        let aug = ClassTable::augkitti();
        assert_eq!(aug.num_id_classes(), 9);
        assert!(aug.is_ood(aug.class_by_name("people").unwrap()));
        assert!(aug.is_ood(aug.class_by_name("ri").unwrap()));
        let poss = ClassTable::semanticposs();
        assert_eq!(poss.lookup(5), Some(Some(poss.class_by_name("people").unwrap())));
        for (id, c) in kitti.classes() {
            assert_eq!(poss.class_name(id), c.name);
        }
    }

    #[test]
    fn ood_must_trail() {
        let mut cfg: ClassTableConfig = toml::from_str(SEMANTICKITTI_TOML).unwrap();
        cfg.ood = vec!["road".into()];
        assert!(matches!(ClassTable::from_config(cfg), Err(TaxonomyError::Invalid(_))));
    }

    #[test]
    fn duplicate_raw_rejected() {
        let mut cfg: ClassTableConfig = toml::from_str(SEMANTICKITTI_TOML).unwrap();
        cfg.classes[1].raw.push(40);
        assert!(matches!(ClassTable::from_config(cfg), Err(TaxonomyError::Invalid(_))));
    }

    #[test]
    fn weight_closed_forms() {
        let w = class_weights(&ClassCounts::from_millions(&[0.386, 12.43, 1.0]), 0.9, true).unwrap();
        assert!((w[0] - 25.09).abs() <= 0.01);
        assert!((w[1] - 1.36).abs() <= 0.01);
        assert!((w[2] - 10.0).abs() < 1e-9);
        let raw = class_weights(&ClassCounts::from_millions(&[1.0]), 0.9, false).unwrap();
        assert!((raw[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_count_is_degenerate() {
        let r = class_weights(&ClassCounts::new(vec![5, 0]), 0.9, true);
        assert!(matches!(r, Err(TaxonomyError::DegenerateCount { class: 1 })));
        assert!(matches!(
            class_weights(&ClassCounts::new(vec![5]), 1.0, true),
            Err(TaxonomyError::InvalidBeta(_))
        ));
    }

    proptest! {
        #[test]
        fn weights_decrease_with_count(mut counts in prop::collection::vec(1u64..2_000_000_000, 2..12), beta in 0.05f64..0.999) {
            counts.sort_unstable();
            counts.dedup();
            let w = class_weights(&ClassCounts::new(counts.clone()), beta, true).unwrap();
            for pair in w.windows(2) {
                prop_assert!(pair[0] >= pair[1]);
            }
            for (&n, &wi) in counts.iter().zip(&w) {
                prop_assert!(wi >= 1.0);
                if beta.powf(n as f64 / 1e6) > 1e-12 {
                    // strict while β^n is resolvable next to 1
                    prop_assert!(wi > 1.0);
                }
            }
        }

        #[test]
        fn merge_with_identity_map_is_idempotent(raw in prop::collection::vec(0u16..10, 0..50)) {
            let names: Vec<String> = (0..10).map(|r| format!("c{r}")).collect();
            let entries: Vec<(u16, &str)> = names.iter().enumerate().map(|(r, n)| (r as u16, n.as_str())).collect();
            let t = table_with_ignore(&entries, &[]);
            let once = merge_labels(&raw, &t).unwrap();
            let ids: Vec<u16> = once.iter().map(|l| l.unwrap().0).collect();
            let twice = merge_labels(&ids, &t).unwrap();
            prop_assert_eq!(&once, &twice);
        }
    }
}
