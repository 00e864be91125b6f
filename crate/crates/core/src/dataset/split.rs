//! Stratified case-level train/validation/test split.
//!
//! Split sizes are fixed globally by largest-remainder apportionment. Each
//! stratum's three counts are then rounded jointly (every count is the floor or
//! ceiling of its ideal value while rows and columns hit their totals exactly),
//! which is solved as a small max-flow problem.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::types::{derive_case_labels, Exam, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StratumKey {
    Density,
    LesionCategory,
    PathologyCategory,
}

impl fmt::Display for StratumKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StratumKey::Density => "density",
            StratumKey::LesionCategory => "lesion_category",
            StratumKey::PathologyCategory => "pathology_category",
        })
    }
}

impl FromStr for StratumKey {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "density" => Ok(StratumKey::Density),
            "lesion_category" => Ok(StratumKey::LesionCategory),
            "pathology_category" => Ok(StratumKey::PathologyCategory),
            other => Err(Error::Config(format!("unknown stratum key '{other}'"))),
        }
    }
}

impl StratumKey {
    pub fn value_of(self, exam: &Exam) -> String {
        let labels = derive_case_labels(exam);
        match self {
            StratumKey::Density => exam.density.to_string(),
            StratumKey::LesionCategory => labels.lesion_category.to_string(),
            StratumKey::PathologyCategory => labels.pathology_category.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn new(train: f64, validation: f64, test: f64) -> Result<Self> {
        let r = Self {
            train,
            validation,
            test,
        };
        let all = r.as_array();
        if all.iter().any(|v| !(*v > 0.0)) || (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios must be positive and sum to 1, got {train}, {validation}, {test}"
            )));
        }
        Ok(r)
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.train, self.validation, self.test]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.validation.len(), self.test.len())
    }

    pub fn split_of(&self, case_id: &str) -> Option<Split> {
        Split::ALL
            .into_iter()
            .find(|s| self.ids(*s).iter().any(|c| c == case_id))
    }
}

/// Minimal per-case input of the split algorithm.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitCase {
    pub case_id: String,
    pub strata: Vec<String>,
    pub preassigned: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitRow {
    pub case_id: String,
    pub split: Split,
    pub strata: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitReport {
    pub keys: Vec<String>,
    pub rows: Vec<SplitRow>,
    pub warnings: Vec<String>,
}

impl SplitReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
        let mut header = vec!["case_id".to_string(), "split".to_string()];
        header.extend(self.keys.iter().cloned());
        w.write_record(&header).map_err(|e| Error::Format(e.to_string()))?;
        for r in &self.rows {
            let mut rec = vec![r.case_id.clone(), r.split.to_string()];
            rec.extend(r.strata.iter().cloned());
            w.write_record(&rec).map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct SplitOutcome {
    pub split: DatasetSplit,
    pub report: SplitReport,
}

pub fn split_dataset(
    exams: &[Exam],
    ratios: SplitRatios,
    strata_keys: &[StratumKey],
    seed: u64,
) -> Result<SplitOutcome> {
    let mut seen = std::collections::HashSet::new();
    for e in exams {
        if !seen.insert(e.case_id.as_str()) {
            return Err(Error::Data(format!("duplicate case_id {}", e.case_id)));
        }
    }
    let cases: Vec<SplitCase> = exams
        .iter()
        .map(|e| SplitCase {
            case_id: e.case_id.clone(),
            strata: strata_keys.iter().map(|k| k.value_of(e)).collect(),
            preassigned: e.preassigned_split,
        })
        .collect();
    let keys = strata_keys.iter().map(ToString::to_string).collect();
    split_cases(&cases, keys, ratios, seed)
}

/// Largest-remainder apportionment of `total` by `ratios`; ties go to the
/// earlier entry.
pub fn largest_remainder(total: usize, ratios: &[f64]) -> Vec<usize> {
    let ideal: Vec<f64> = ratios.iter().map(|r| r * total as f64).collect();
    let mut out: Vec<usize> = ideal.iter().map(|v| v.floor() as usize).collect();
    let mut left = total.saturating_sub(out.iter().sum());
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (ideal[a] - ideal[a].floor(), ideal[b] - ideal[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for i in order {
        if left == 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    out
}

struct Stratum {
    members: Vec<usize>,
    pre_test: usize,
    pre_train: usize,
}

impl Stratum {
    fn n(&self) -> usize {
        self.members.len()
    }
    fn unassigned(&self) -> usize {
        self.n() - self.pre_test - self.pre_train
    }
}

pub fn split_cases(cases: &[SplitCase], keys: Vec<String>, ratios: SplitRatios, seed: u64) -> Result<SplitOutcome> {
    let n_total = cases.len();
    if n_total == 0 {
        return Err(Error::Data("cannot split an empty dataset".into()));
    }
    let targets = largest_remainder(n_total, &ratios.as_array());
    let mut strata: BTreeMap<Vec<String>, Stratum> = BTreeMap::new();
    for (i, c) in cases.iter().enumerate() {
        let s = strata.entry(c.strata.clone()).or_insert(Stratum {
            members: Vec::new(),
            pre_test: 0,
            pre_train: 0,
        });
        s.members.push(i);
        match c.preassigned {
            Some(Split::Test) => s.pre_test += 1,
            Some(Split::Train) => s.pre_train += 1,
            Some(Split::Validation) => {
                return Err(Error::Data(format!(
                    "case {}: validation cannot be preassigned",
                    c.case_id
                )))
            }
            None => {}
        }
    }
    let total_pre_test: usize = strata.values().map(|s| s.pre_test).sum();
    let total_pre_train: usize = strata.values().map(|s| s.pre_train).sum();
    if total_pre_test > targets[2] || total_pre_train > targets[0] + targets[1] {
        return Err(Error::Data(format!(
            "pre-assignments ({total_pre_train} train, {total_pre_test} test) exceed split sizes {targets:?}"
        )));
    }

    let mut warnings = Vec::new();
    for (key, s) in &strata {
        if s.n() < Split::ALL.len() {
            warnings.push(format!(
                "stratum [{}] has {} case(s); assigned by global ratio",
                key.join(", "),
                s.n()
            ));
        }
    }

    let list: Vec<&Stratum> = strata.values().collect();
    let r = ratios.as_array();
    let proportional: Vec<[f64; 3]> = list
        .iter()
        .map(|s| [r[0] * s.n() as f64, r[1] * s.n() as f64, r[2] * s.n() as f64])
        .collect();
    let counts = match round_table(&list, &proportional, &targets) {
        Some(c) => c,
        None => {
            // Pre-assignments pin the test column; distribute only the free cases
            // proportionally and split the train pool by the train/validation ratio.
            let free_test = (targets[2] - total_pre_test) as f64;
            let free: usize = list.iter().map(|s| s.unassigned()).sum();
            let pool = (n_total - targets[2]) as f64;
            let ideal: Vec<[f64; 3]> = list
                .iter()
                .map(|s| {
                    let test = s.pre_test as f64
                        + if free > 0 {
                            free_test * s.unassigned() as f64 / free as f64
                        } else {
                            0.0
                        };
                    let rest = s.n() as f64 - test;
                    let val = if pool > 0.0 {
                        rest * targets[1] as f64 / pool
                    } else {
                        0.0
                    };
                    [rest - val, val, test]
                })
                .collect();
            round_table(&list, &ideal, &targets)
                .ok_or_else(|| Error::Data("no split satisfies the pre-assignments and split sizes".into()))?
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment: Vec<Option<Split>> = vec![None; n_total];
    for (s, c) in list.iter().zip(&counts) {
        let mut members = s.members.clone();
        members.sort_by(|&a, &b| cases[a].case_id.cmp(&cases[b].case_id));
        members.shuffle(&mut rng);
        let mut test_left = c[2];
        for &m in &members {
            if cases[m].preassigned == Some(Split::Test) {
                assignment[m] = Some(Split::Test);
                test_left -= 1;
            }
        }
        for &m in &members {
            if test_left > 0 && cases[m].preassigned.is_none() {
                assignment[m] = Some(Split::Test);
                test_left -= 1;
            }
        }
        let mut val_left = c[1];
        for &m in &members {
            if assignment[m].is_none() {
                if val_left > 0 {
                    assignment[m] = Some(Split::Validation);
                    val_left -= 1;
                } else {
                    assignment[m] = Some(Split::Train);
                }
            }
        }
    }

    let mut split = DatasetSplit::default();
    let mut rows = Vec::with_capacity(n_total);
    for (c, a) in cases.iter().zip(&assignment) {
        let a = a.expect("every case assigned");
        match a {
            Split::Train => split.train.push(c.case_id.clone()),
            Split::Validation => split.validation.push(c.case_id.clone()),
            Split::Test => split.test.push(c.case_id.clone()),
        }
        rows.push(SplitRow {
            case_id: c.case_id.clone(),
            split: a,
            strata: c.strata.clone(),
        });
    }
    for ids in [&mut split.train, &mut split.validation, &mut split.test] {
        ids.sort();
    }
    rows.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(SplitOutcome {
        split,
        report: SplitReport { keys, rows, warnings },
    })
}

/// Round each stratum's ideal counts to floor/ceil so that every stratum keeps
/// its size and every split reaches its target, while respecting the
/// pre-assignment limits on the test column.
fn round_table(strata: &[&Stratum], ideal: &[[f64; 3]], targets: &[usize]) -> Option<Vec<[usize; 3]>> {
    let g = strata.len();
    let mut lo = vec![[0usize; 3]; g];
    let mut hi = vec![[0usize; 3]; g];
    for (i, s) in strata.iter().enumerate() {
        for j in 0..3 {
            let x = ideal[i][j].max(0.0);
            let (f, c) = (x.floor(), x.ceil());
            // guard against representation noise around integers
            let (f, c) = if (x - x.round()).abs() < 1e-9 {
                (x.round(), x.round())
            } else {
                (f, c)
            };
            lo[i][j] = f as usize;
            hi[i][j] = c as usize;
        }
        let test_min = s.pre_test;
        let test_max = s.pre_test + s.unassigned();
        lo[i][2] = lo[i][2].max(test_min);
        hi[i][2] = hi[i][2].min(test_max);
        for j in 0..2 {
            hi[i][j] = hi[i][j].min(s.n() - s.pre_test);
        }
        if (0..3).any(|j| lo[i][j] > hi[i][j]) {
            return None;
        }
    }
    let row_need: Vec<usize> = (0..g)
        .map(|i| strata[i].n().checked_sub(lo[i].iter().sum()))
        .collect::<Option<_>>()?;
    let col_need: Vec<usize> = (0..3)
        .map(|j| targets[j].checked_sub((0..g).map(|i| lo[i][j]).sum()))
        .collect::<Option<_>>()?;
    let total: usize = row_need.iter().sum();
    if total != col_need.iter().sum::<usize>() {
        return None;
    }

    // nodes: 0 source, 1..=g strata, g+1..=g+3 splits, g+4 sink
    let nodes = g + 5;
    let sink = g + 4;
    let mut cap = vec![vec![0i64; nodes]; nodes];
    for i in 0..g {
        cap[0][1 + i] = row_need[i] as i64;
        for j in 0..3 {
            cap[1 + i][g + 1 + j] = (hi[i][j] - lo[i][j]) as i64;
        }
    }
    for j in 0..3 {
        cap[g + 1 + j][sink] = col_need[j] as i64;
    }
    let flow = max_flow(&mut cap, 0, sink);
    if flow as usize != total {
        return None;
    }
    // residual capacity on the reverse edge equals the pushed flow
    Some(
        (0..g)
            .map(|i| {
                let mut c = lo[i];
                for j in 0..3 {
                    c[j] += cap[g + 1 + j][1 + i] as usize;
                }
                c
            })
            .collect(),
    )
}

/// Edmonds-Karp on a dense capacity matrix, updated in place to the residual graph.
fn max_flow(cap: &mut [Vec<i64>], source: usize, sink: usize) -> i64 {
    let n = cap.len();
    let mut total = 0;
    loop {
        let mut parent = vec![usize::MAX; n];
        parent[source] = source;
        let mut queue = VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            for v in 0..n {
                if parent[v] == usize::MAX && cap[u][v] > 0 {
                    parent[v] = u;
                    queue.push_back(v);
                }
            }
        }
        if parent[sink] == usize::MAX {
            return total;
        }
        let mut bottleneck = i64::MAX;
        let mut v = sink;
        while v != source {
            let u = parent[v];
            bottleneck = bottleneck.min(cap[u][v]);
            v = u;
        }
        let mut v = sink;
        while v != source {
            let u = parent[v];
            cap[u][v] -= bottleneck;
            cap[v][u] += bottleneck;
            v = u;
        }
        total += bottleneck;
    }
}
