//! Lane partition planning for the staged attention stages.
//!
//! A partition setting assigns execution lanes to the shared stage, the
//! unshared stage, and the merge stage. With a trained [`PlannerModel`]
//! (a small squared-error regression tree over cache lengths and the lane
//! triplet) planning is an argmin over all feasible triplets; without one,
//! a compute-volume heuristic splits lanes proportionally.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lane assignment triplet. A stage that is empty for the current shapes
/// may hold zero lanes; every non-empty stage needs at least one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSetting {
    pub lanes_shared: usize,
    pub lanes_unshared: usize,
    pub lanes_merge: usize,
}

impl PartitionSetting {
    pub fn total(&self) -> usize {
        self.lanes_shared + self.lanes_unshared + self.lanes_merge
    }
}

/// One observed timing: shapes, the triplet that ran them, and the
/// measured latency in seconds.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PlannerSample {
    pub shared_len: f64,
    pub unshared_len: f64,
    pub lanes_shared: usize,
    pub lanes_unshared: usize,
    pub lanes_merge: usize,
    pub latency_s: f64,
}

impl PlannerSample {
    fn features(&self) -> [f64; 5] {
        [
            self.shared_len,
            self.unshared_len,
            self.lanes_shared as f64,
            self.lanes_unshared as f64,
            self.lanes_merge as f64,
        ]
    }
}

pub const FEATURE_NAMES: [&str; 5] = [
    "shared_len",
    "unshared_len",
    "lanes_shared",
    "lanes_unshared",
    "lanes_merge",
];

#[derive(Debug, Clone)]
enum Node {
    Split {
        feature: String,
        threshold: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
    Leaf {
        leaf_latency: f64,
    },
}

impl Node {
    /// `{feature, threshold, left, right}` for splits, `{leaf_latency}`
    /// for leaves. Hand-rolled: serde's untagged buffering does not
    /// round-trip f64 exactly.
    fn to_value(&self) -> serde_json::Value {
        match self {
            Node::Leaf { leaf_latency } => serde_json::json!({ "leaf_latency": leaf_latency }),
            Node::Split {
                feature,
                threshold,
                left,
                right,
            } => serde_json::json!({
                "feature": feature,
                "threshold": threshold,
                "left": left.to_value(),
                "right": right.to_value(),
            }),
        }
    }

    fn from_value(v: &serde_json::Value) -> Result<Node> {
        let obj = v
            .as_object()
            .ok_or_else(|| Error::Input("planner node must be a JSON object".into()))?;
        if let Some(lat) = obj.get("leaf_latency") {
            let leaf_latency = lat
                .as_f64()
                .ok_or_else(|| Error::Input("leaf_latency must be a number".into()))?;
            return Ok(Node::Leaf { leaf_latency });
        }
        let feature = obj
            .get("feature")
            .and_then(|f| f.as_str())
            .ok_or_else(|| Error::Input("split node needs a feature name".into()))?;
        if !FEATURE_NAMES.contains(&feature) {
            return Err(Error::Input(format!("unknown planner feature {feature:?}")));
        }
        let threshold = obj
            .get("threshold")
            .and_then(|t| t.as_f64())
            .ok_or_else(|| Error::Input("split node needs a numeric threshold".into()))?;
        let left = obj
            .get("left")
            .ok_or_else(|| Error::Input("split node needs a left child".into()))?;
        let right = obj
            .get("right")
            .ok_or_else(|| Error::Input("split node needs a right child".into()))?;
        Ok(Node::Split {
            feature: feature.to_string(),
            threshold,
            left: Box::new(Node::from_value(left)?),
            right: Box::new(Node::from_value(right)?),
        })
    }
}

/// Regression tree predicting staged-attention latency from
/// `(shared_len, unshared_len, lanes_shared, lanes_unshared, lanes_merge)`.
/// Deployment-fixed parameters (beam width, heads) are deliberately not
/// features.
#[derive(Debug, Clone)]
pub struct PlannerModel {
    root: Node,
}

#[derive(Debug, Clone, Copy)]
pub struct PlannerTrainConfig {
    pub max_depth: usize,
    pub min_leaf: usize,
}

impl Default for PlannerTrainConfig {
    fn default() -> Self {
        PlannerTrainConfig {
            max_depth: 6,
            min_leaf: 4,
        }
    }
}

impl PlannerModel {
    /// Fit a CART-style regression tree with squared-error splits.
    /// Deterministic given the samples and config: features are scanned in
    /// order, candidate thresholds ascending, and only strict improvements
    /// replace the incumbent split.
    pub fn train(samples: &[PlannerSample], cfg: &PlannerTrainConfig) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Training("no samples provided".into()));
        }
        let xs: Vec<[f64; 5]> = samples.iter().map(|s| s.features()).collect();
        let ys: Vec<f64> = samples.iter().map(|s| s.latency_s).collect();
        for y in &ys {
            if !y.is_finite() || *y <= 0.0 {
                return Err(Error::Training(format!("latency must be positive, got {y}")));
            }
        }
        let idx: Vec<usize> = (0..samples.len()).collect();
        let root = build_node(&xs, &ys, &idx, 0, cfg);
        Ok(PlannerModel { root })
    }

    pub fn predict(&self, features: &[f64; 5]) -> f64 {
        let mut node = &self.root;
        loop {
            match node {
                Node::Leaf { leaf_latency } => return *leaf_latency,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    let fi = FEATURE_NAMES
                        .iter()
                        .position(|n| n == feature)
                        .expect("model uses a known feature");
                    node = if features[fi] <= *threshold { left } else { right };
                }
            }
        }
    }

    pub fn predict_setting(&self, shared_len: usize, unshared_len: usize, s: &PartitionSetting) -> f64 {
        self.predict(&[
            shared_len as f64,
            unshared_len as f64,
            s.lanes_shared as f64,
            s.lanes_unshared as f64,
            s.lanes_merge as f64,
        ])
    }

    pub fn depth(&self) -> usize {
        fn d(n: &Node) -> usize {
            match n {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + d(left).max(d(right)),
            }
        }
        d(&self.root)
    }

    pub fn leaf_count(&self) -> usize {
        fn c(n: &Node) -> usize {
            match n {
                Node::Leaf { .. } => 1,
                Node::Split { left, right, .. } => c(left) + c(right),
            }
        }
        c(&self.root)
    }

    /// Mean squared error over a sample set.
    pub fn mse(&self, samples: &[PlannerSample]) -> f64 {
        if samples.is_empty() {
            return 0.0;
        }
        samples
            .iter()
            .map(|s| {
                let e = self.predict(&s.features()) - s.latency_s;
                e * e
            })
            .sum::<f64>()
            / samples.len() as f64
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.root.to_value())?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(json)?;
        Ok(PlannerModel {
            root: Node::from_value(&v)?,
        })
    }
}

fn mean(ys: &[f64], idx: &[usize]) -> f64 {
    idx.iter().map(|&i| ys[i]).sum::<f64>() / idx.len() as f64
}

fn sse(ys: &[f64], idx: &[usize]) -> f64 {
    let m = mean(ys, idx);
    idx.iter().map(|&i| (ys[i] - m).powi(2)).sum()
}

fn build_node(xs: &[[f64; 5]], ys: &[f64], idx: &[usize], depth: usize, cfg: &PlannerTrainConfig) -> Node {
    let leaf = || Node::Leaf {
        leaf_latency: mean(ys, idx),
    };
    if depth >= cfg.max_depth || idx.len() < 2 * cfg.min_leaf || idx.len() < 2 {
        return leaf();
    }
    let parent_sse = sse(ys, idx);
    let mut best: Option<(usize, f64, f64)> = None; // (feature, threshold, total sse)

    for f in 0..5 {
        let mut vals: Vec<f64> = idx.iter().map(|&i| xs[i][f]).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        vals.dedup();
        for w in vals.windows(2) {
            let thr = (w[0] + w[1]) / 2.0;
            let left: Vec<usize> = idx.iter().copied().filter(|&i| xs[i][f] <= thr).collect();
            let right: Vec<usize> = idx.iter().copied().filter(|&i| xs[i][f] > thr).collect();
            if left.len() < cfg.min_leaf || right.len() < cfg.min_leaf {
                continue;
            }
            let total = sse(ys, &left) + sse(ys, &right);
            if best.as_ref().map_or(true, |&(_, _, b)| total < b - 1e-15) {
                best = Some((f, thr, total));
            }
        }
    }

    match best {
        Some((f, thr, total)) if total < parent_sse - 1e-15 => {
            let left_idx: Vec<usize> = idx.iter().copied().filter(|&i| xs[i][f] <= thr).collect();
            let right_idx: Vec<usize> = idx.iter().copied().filter(|&i| xs[i][f] > thr).collect();
            Node::Split {
                feature: FEATURE_NAMES[f].to_string(),
                threshold: thr,
                left: Box::new(build_node(xs, ys, &left_idx, depth + 1, cfg)),
                right: Box::new(build_node(xs, ys, &right_idx, depth + 1, cfg)),
            }
        }
        _ => leaf(),
    }
}

// ── Planning ────────────────────────────────────────────────────────

/// Choose a lane triplet for the given stage shapes.
///
/// `queries` is the deployment-fixed beam width: every shared token is
/// read by all queries while each unshared token belongs to exactly one
/// beam, so the heuristic weighs the shared stage by `shared_len *
/// queries` against `unshared_len`. With a model, planning is an argmin of
/// predicted latency over all feasible triplets (ties resolved
/// lexicographically).
pub fn plan_partition(
    shared_len: usize,
    unshared_len: usize,
    total_lanes: usize,
    queries: usize,
    model: Option<&PlannerModel>,
) -> Result<PartitionSetting> {
    let need = usize::from(shared_len > 0) + usize::from(unshared_len > 0) + 1;
    if total_lanes < need {
        return Err(Error::Config(format!(
            "lane budget {total_lanes} infeasible: stages require at least {need}"
        )));
    }

    if let Some(model) = model {
        let mut best: Option<(f64, PartitionSetting)> = None;
        let s_range: Vec<usize> = if shared_len > 0 { (1..=total_lanes).collect() } else { vec![0] };
        let u_range: Vec<usize> = if unshared_len > 0 { (1..=total_lanes).collect() } else { vec![0] };
        for &s in &s_range {
            for &u in &u_range {
                for m in 1..=total_lanes {
                    if s + u + m > total_lanes {
                        continue;
                    }
                    let setting = PartitionSetting {
                        lanes_shared: s,
                        lanes_unshared: u,
                        lanes_merge: m,
                    };
                    let pred = model.predict_setting(shared_len, unshared_len, &setting);
                    if best.as_ref().map_or(true, |&(b, _)| pred < b) {
                        best = Some((pred, setting));
                    }
                }
            }
        }
        return Ok(best.expect("feasible triplet exists").1);
    }

    // Heuristic path.
    if shared_len == 0 && unshared_len == 0 {
        return Ok(PartitionSetting {
            lanes_shared: 0,
            lanes_unshared: 0,
            lanes_merge: total_lanes,
        });
    }
    if shared_len == 0 {
        let merge = (total_lanes / 4).max(1);
        return Ok(PartitionSetting {
            lanes_shared: 0,
            lanes_unshared: total_lanes - merge,
            lanes_merge: merge,
        });
    }
    if unshared_len == 0 {
        let merge = (total_lanes / 4).max(1);
        return Ok(PartitionSetting {
            lanes_shared: total_lanes - merge,
            lanes_unshared: 0,
            lanes_merge: merge,
        });
    }
    let merge = 1usize;
    let rest = total_lanes - merge;
    let w_shared = shared_len as u128 * queries.max(1) as u128;
    let w_unshared = unshared_len as u128;
    let shared = ((rest as u128 * w_shared + (w_shared + w_unshared) / 2) / (w_shared + w_unshared))
        .clamp(1, (rest - 1) as u128) as usize;
    Ok(PartitionSetting {
        lanes_shared: shared,
        lanes_unshared: rest - shared,
        lanes_merge: merge,
    })
}

// ── Sample I/O ──────────────────────────────────────────────────────

/// Read training samples from CSV with columns
/// `shared_len,unshared_len,lanes_shared,lanes_unshared,lanes_merge,latency_s`.
pub fn read_samples_csv<R: std::io::Read>(reader: R) -> Result<Vec<PlannerSample>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    {
        let headers = rdr.headers()?;
        let expect = [
            "shared_len",
            "unshared_len",
            "lanes_shared",
            "lanes_unshared",
            "lanes_merge",
            "latency_s",
        ];
        let got: Vec<&str> = headers.iter().collect();
        if got != expect {
            return Err(Error::Input(format!(
                "bad planner CSV header: expected {expect:?}, got {got:?}"
            )));
        }
    }
    let mut samples = Vec::new();
    for rec in rdr.deserialize::<(f64, f64, usize, usize, usize, f64)>() {
        let (shared_len, unshared_len, lanes_shared, lanes_unshared, lanes_merge, latency_s) =
            rec.map_err(|e| Error::Input(format!("bad planner CSV row: {e}")))?;
        samples.push(PlannerSample {
            shared_len,
            unshared_len,
            lanes_shared,
            lanes_unshared,
            lanes_merge,
            latency_s,
        });
    }
    Ok(samples)
}

pub fn write_samples_csv<W: std::io::Write>(w: W, samples: &[PlannerSample]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "shared_len",
        "unshared_len",
        "lanes_shared",
        "lanes_unshared",
        "lanes_merge",
        "latency_s",
    ])?;
    for s in samples {
        wtr.write_record([
            s.shared_len.to_string(),
            s.unshared_len.to_string(),
            s.lanes_shared.to_string(),
            s.lanes_unshared.to_string(),
            s.lanes_merge.to_string(),
            s.latency_s.to_string(),
        ])?;
    }
    wtr.flush().map_err(Error::Io)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(shared: f64, unshared: f64, s: usize, u: usize, m: usize, lat: f64) -> PlannerSample {
        PlannerSample {
            shared_len: shared,
            unshared_len: unshared,
            lanes_shared: s,
            lanes_unshared: u,
            lanes_merge: m,
            latency_s: lat,
        }
    }

    #[test]
    fn constant_latency_trains_single_leaf() {
        let samples: Vec<PlannerSample> = (0..10)
            .map(|i| sample(100.0 * i as f64, 50.0, 1 + i % 3, 1, 1, 0.5))
            .collect();
        let model = PlannerModel::train(&samples, &PlannerTrainConfig::default()).unwrap();
        assert_eq!(model.leaf_count(), 1);
        assert!((model.predict(&[123.0, 50.0, 2.0, 1.0, 1.0]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn perfect_threshold_split_trains_depth_one() {
        let mut samples = Vec::new();
        for i in 0..4 {
            samples.push(sample(100.0 + i as f64, 10.0, 1, 1, 1, 1.0));
            samples.push(sample(900.0 + i as f64, 10.0, 1, 1, 1, 5.0));
        }
        let model = PlannerModel::train(&samples, &PlannerTrainConfig::default()).unwrap();
        assert_eq!(model.depth(), 1);
        assert!((model.predict(&[150.0, 10.0, 1.0, 1.0, 1.0]) - 1.0).abs() < 1e-12);
        assert!((model.predict(&[950.0, 10.0, 1.0, 1.0, 1.0]) - 5.0).abs() < 1e-12);
        assert!(model.mse(&samples) < 1e-20);
    }

    #[test]
    fn training_mse_bounded_by_target_variance() {
        let samples: Vec<PlannerSample> = (0..40)
            .map(|i| {
                sample(
                    (i * 37 % 1000) as f64,
                    (i * 13 % 300) as f64,
                    1 + i % 4,
                    1 + i % 3,
                    1,
                    0.1 + ((i * 7919) % 100) as f64 / 100.0,
                )
            })
            .collect();
        let model = PlannerModel::train(&samples, &PlannerTrainConfig::default()).unwrap();
        let mean = samples.iter().map(|s| s.latency_s).sum::<f64>() / samples.len() as f64;
        let var = samples.iter().map(|s| (s.latency_s - mean).powi(2)).sum::<f64>() / samples.len() as f64;
        assert!(model.mse(&samples) <= var + 1e-12);
    }

    #[test]
    fn empty_sample_set_is_a_training_error() {
        assert!(matches!(
            PlannerModel::train(&[], &PlannerTrainConfig::default()),
            Err(Error::Training(_))
        ));
    }

    #[test]
    fn heuristic_empty_shared_stage_gets_zero_lanes() {
        let s = plan_partition(0, 1536, 8, 512, None).unwrap();
        assert_eq!(s.lanes_shared, 0);
        assert!(s.lanes_unshared >= 1 && s.lanes_merge >= 1);
        assert_eq!(s.total(), 8);
    }

    #[test]
    fn heuristic_weighs_shared_stage_by_query_reuse() {
        // 1024 shared tokens read by 512 queries outweigh 512*3 unshared
        // tokens each read once.
        let s = plan_partition(1024, 512 * 3, 8, 512, None).unwrap();
        assert!(s.lanes_shared >= s.lanes_unshared);
        assert!(s.lanes_shared >= 1 && s.lanes_unshared >= 1 && s.lanes_merge >= 1);
        assert!(s.total() <= 8);
    }

    #[test]
    fn infeasible_budget_is_rejected() {
        assert!(matches!(plan_partition(10, 10, 2, 4, None), Err(Error::Config(_))));
    }

    #[test]
    fn planted_optimum_is_selected() {
        // Build a model whose prediction is minimized at exactly (2, 1, 1).
        let mut samples = Vec::new();
        for s in 1..=4usize {
            for u in 1..=4usize {
                for m in 1..=4usize {
                    if s + u + m > 6 {
                        continue;
                    }
                    let lat = if (s, u, m) == (2, 1, 1) { 0.1 } else { 1.0 + s as f64 };
                    for _ in 0..4 {
                        samples.push(sample(500.0, 24.0, s, u, m, lat));
                    }
                }
            }
        }
        let model = PlannerModel::train(
            &samples,
            &PlannerTrainConfig {
                max_depth: 8,
                min_leaf: 1,
            },
        )
        .unwrap();
        let best = plan_partition(500, 24, 6, 8, Some(&model)).unwrap();
        assert_eq!(
            best,
            PartitionSetting {
                lanes_shared: 2,
                lanes_unshared: 1,
                lanes_merge: 1
            }
        );
    }

    #[test]
    fn model_json_round_trips() {
        let samples: Vec<PlannerSample> = (0..8)
            .map(|i| sample(i as f64 * 100.0, 30.0, 1 + i % 2, 1, 1, 0.2 + i as f64 * 0.05))
            .collect();
        let model = PlannerModel::train(&samples, &PlannerTrainConfig::default()).unwrap();
        let json = model.to_json().unwrap();
        let back = PlannerModel::from_json(&json).unwrap();
        for i in 0..8 {
            let f = [i as f64 * 100.0, 30.0, 1.0, 1.0, 1.0];
            assert_eq!(model.predict(&f), back.predict(&f));
        }
    }

    #[test]
    fn csv_round_trips() {
        let samples = vec![sample(100.0, 10.0, 2, 1, 1, 0.25), sample(200.0, 20.0, 3, 2, 1, 0.5)];
        let mut buf = Vec::new();
        write_samples_csv(&mut buf, &samples).unwrap();
        let back = read_samples_csv(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].lanes_shared, 2);
        assert_eq!(back[1].latency_s, 0.5);
    }
}

