//! Domain types and cost formulas: task specifications, hardware profiles,
//! roofline-style generation/training cost models, and link transfer models.
//!
//! The cost model is deliberately simple: 2 FLOPs per parameter per token for
//! a forward pass, 6 for training, and a weight-read floor for decoding. That
//! is enough to reproduce the qualitative affinity behavior of
//! compute-optimized vs bandwidth-optimized devices from their spec sheets.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::dist::LatencyDistribution;
use crate::error::SimError;
use crate::kernel::SimTime;

const TERA: f64 = 1e12;

/// Per-device compute and bandwidth parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    pub name: String,
    /// Peak TFLOP/s (dense), e.g. 148 for an H20.
    pub tflops: f64,
    pub hbm_bytes: f64,
    /// HBM bandwidth in bytes/s.
    pub hbm_bw: f64,
    /// Intra-node interconnect bandwidth in bytes/s.
    pub nvlink_bw: f64,
    pub cost_unit: f64,
    /// Achieved fraction of peak compute, in (0, 1].
    #[serde(default = "default_mfu")]
    pub mfu: f64,
    /// Achieved fraction of peak memory bandwidth, in (0, 1].
    #[serde(default = "default_mbu")]
    pub mbu: f64,
}

pub fn default_mfu() -> f64 {
    0.4
}

pub fn default_mbu() -> f64 {
    0.6
}

impl HardwareProfile {
    pub fn validate(&self) -> Result<(), SimError> {
        let positive = [
            ("tflops", self.tflops),
            ("hbm_bytes", self.hbm_bytes),
            ("hbm_bw", self.hbm_bw),
            ("nvlink_bw", self.nvlink_bw),
            ("cost_unit", self.cost_unit),
        ];
        for (field, v) in positive {
            if !v.is_finite() || v <= 0.0 {
                return Err(SimError::config(format!(
                    "hardware '{}': {field} must be positive, got {v}",
                    self.name
                )));
            }
        }
        for (field, v) in [("mfu", self.mfu), ("mbu", self.mbu)] {
            if !v.is_finite() || v <= 0.0 || v > 1.0 {
                return Err(SimError::config(format!(
                    "hardware '{}': {field} must be in (0, 1], got {v}",
                    self.name
                )));
            }
        }
        Ok(())
    }

    /// Bandwidth-optimized device (H20 class).
    pub fn h20() -> HardwareProfile {
        HardwareProfile {
            name: "H20".into(),
            tflops: 148.0,
            hbm_bytes: 96e9,
            hbm_bw: 4e12,
            nvlink_bw: 900e9,
            cost_unit: 1.0,
            mfu: default_mfu(),
            mbu: default_mbu(),
        }
    }

    /// Compute-optimized device (H800 class).
    pub fn h800() -> HardwareProfile {
        HardwareProfile {
            name: "H800".into(),
            tflops: 989.5,
            hbm_bytes: 80e9,
            hbm_bw: 3.35e12,
            nvlink_bw: 400e9,
            cost_unit: 2.85,
            mfu: default_mfu(),
            mbu: default_mbu(),
        }
    }

    /// Profile scaled by a tensor-parallel group size: a "worker device" of
    /// `degree` GPUs with perfectly pooled compute, memory and bandwidth.
    pub fn scaled(&self, degree: u64) -> HardwareProfile {
        let d = degree as f64;
        HardwareProfile {
            name: self.name.clone(),
            tflops: self.tflops * d,
            hbm_bytes: self.hbm_bytes * d,
            hbm_bw: self.hbm_bw * d,
            nvlink_bw: self.nvlink_bw,
            cost_unit: self.cost_unit * d,
            mfu: self.mfu,
            mbu: self.mbu,
        }
    }
}

/// Model size parameters; weight_bytes is always `params * bytes_per_param`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub params: f64,
    #[serde(default = "default_bytes_per_param")]
    pub bytes_per_param: f64,
    pub kv_bytes_per_token: f64,
}

pub fn default_bytes_per_param() -> f64 {
    2.0
}

impl ModelSpec {
    pub fn new(
        name: impl Into<String>,
        params: f64,
        kv_bytes_per_token: f64,
    ) -> Result<ModelSpec, SimError> {
        let spec = ModelSpec {
            name: name.into(),
            params,
            bytes_per_param: default_bytes_per_param(),
            kv_bytes_per_token,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !self.params.is_finite() || self.params <= 0.0 {
            return Err(SimError::config(format!(
                "model '{}': params must be positive, got {}",
                self.name, self.params
            )));
        }
        if !self.bytes_per_param.is_finite() || self.bytes_per_param <= 0.0 {
            return Err(SimError::config(format!(
                "model '{}': bytes_per_param must be positive",
                self.name
            )));
        }
        if !self.kv_bytes_per_token.is_finite() || self.kv_bytes_per_token <= 0.0 {
            return Err(SimError::config(format!(
                "model '{}': kv_bytes_per_token must be positive",
                self.name
            )));
        }
        Ok(())
    }

    pub fn weight_bytes(&self) -> f64 {
        self.params * self.bytes_per_param
    }

    /// 15.26 GB of bf16 weights.
    pub fn size_8b() -> ModelSpec {
        ModelSpec::new("8b", 7.63e9, 147_456.0).unwrap()
    }

    /// 27.51 GB of bf16 weights.
    pub fn size_14b() -> ModelSpec {
        ModelSpec::new("14b", 13.755e9, 163_840.0).unwrap()
    }

    /// 61.02 GB of bf16 weights.
    pub fn size_32b() -> ModelSpec {
        ModelSpec::new("32b", 30.51e9, 262_144.0).unwrap()
    }

    /// Small judge model for reward evaluation.
    pub fn judge_7b() -> ModelSpec {
        ModelSpec::new("judge-7b", 7.0e9, 114_688.0).unwrap()
    }
}

/// Compute-bound context ingestion: `tokens * 2 * params / (tflops * mfu)`.
pub fn prefill_time(context_tokens: u64, model: &ModelSpec, hw: &HardwareProfile) -> SimTime {
    let flops = context_tokens as f64 * 2.0 * model.params;
    SimTime::secs_unchecked(flops / (hw.tflops * TERA * hw.mfu))
}

/// One decode step for a batch: the weight-read floor with a compute ceiling
/// that takes over at large batch sizes.
pub fn decode_step_time(batch_size: u64, model: &ModelSpec, hw: &HardwareProfile) -> SimTime {
    let memory_bound = model.weight_bytes() / (hw.hbm_bw * hw.mbu);
    let compute_bound = batch_size as f64 * 2.0 * model.params / (hw.tflops * TERA * hw.mfu);
    SimTime::secs_unchecked(memory_bound.max(compute_bound))
}

/// Batch size at which decoding turns compute-bound.
pub fn decode_crossover_batch(model: &ModelSpec, hw: &HardwareProfile) -> f64 {
    model.weight_bytes() * hw.tflops * TERA * hw.mfu
        / (2.0 * model.params * hw.hbm_bw * hw.mbu)
}

/// A pool entry for training-time estimation.
#[derive(Debug, Clone)]
pub struct DevicePool {
    pub profile: HardwareProfile,
    pub devices: u64,
}

/// One logical training pass: `batch_tokens * 6 * params / sum(tflops * mfu)`,
/// assuming perfect scaling over the pool.
pub fn train_step_time(
    batch_tokens: u64,
    model: &ModelSpec,
    pool: &[DevicePool],
) -> Result<SimTime, SimError> {
    if pool.is_empty() || pool.iter().all(|p| p.devices == 0) {
        return Err(SimError::config("training pool is empty"));
    }
    let rate: f64 = pool
        .iter()
        .map(|p| p.devices as f64 * p.profile.tflops * TERA * p.profile.mfu)
        .sum();
    let flops = batch_tokens as f64 * 6.0 * model.params;
    Ok(SimTime::secs_unchecked(flops / rate))
}

/// Point-to-point transfer model: `transfer_time(n) = overhead + n / bandwidth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkModel {
    pub name: String,
    /// Fixed per-transfer overhead in seconds (>= 0).
    pub fixed_overhead: f64,
    /// Effective bandwidth in bytes/s (> 0).
    pub eff_bandwidth: f64,
}

impl LinkModel {
    pub fn new(name: impl Into<String>, fixed_overhead: f64, eff_bandwidth: f64) -> Result<Self, SimError> {
        if !fixed_overhead.is_finite() || fixed_overhead < 0.0 {
            return Err(SimError::config(format!(
                "link overhead {fixed_overhead} must be finite and >= 0"
            )));
        }
        if !eff_bandwidth.is_finite() || eff_bandwidth <= 0.0 {
            return Err(SimError::config(format!(
                "link bandwidth {eff_bandwidth} must be positive"
            )));
        }
        Ok(LinkModel {
            name: name.into(),
            fixed_overhead,
            eff_bandwidth,
        })
    }

    pub fn transfer_time(&self, bytes: f64) -> SimTime {
        SimTime::secs_unchecked(self.fixed_overhead + bytes / self.eff_bandwidth)
    }
}

/// Measured cross-cluster transfer rows (weight bytes, seconds), as observed
/// when publishing from a training cluster over 200 Gbps Ethernet.
pub fn tcp_reference_samples() -> Vec<(f64, f64)> {
    vec![(15.26e9, 6.911), (27.51e9, 14.437), (61.02e9, 29.649)]
}

/// Same transfers over 400 Gbps InfiniBand.
pub fn rdma_reference_samples() -> Vec<(f64, f64)> {
    vec![(15.26e9, 5.466), (27.51e9, 5.817), (61.02e9, 9.442)]
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibrationRow {
    pub bytes: f64,
    pub observed: f64,
    pub predicted: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibrationReport {
    pub model: LinkModel,
    pub rows: Vec<CalibrationRow>,
    pub max_rel_err: f64,
}

/// Least-squares fit of `time = overhead + bytes / bandwidth` over measured
/// `(bytes, seconds)` samples. A negative fitted intercept is clamped to
/// zero (a link cannot refund time).
pub fn calibrate_link(
    name: impl Into<String>,
    samples: &[(f64, f64)],
) -> Result<CalibrationReport, SimError> {
    if samples.len() < 2 {
        return Err(SimError::Calibration(format!(
            "need at least 2 samples, got {}",
            samples.len()
        )));
    }
    let n = samples.len() as f64;
    let mean_x = samples.iter().map(|(x, _)| x).sum::<f64>() / n;
    let mean_y = samples.iter().map(|(_, y)| y).sum::<f64>() / n;
    let sxx: f64 = samples.iter().map(|(x, _)| (x - mean_x).powi(2)).sum();
    let sxy: f64 = samples
        .iter()
        .map(|(x, y)| (x - mean_x) * (y - mean_y))
        .sum();
    if sxx == 0.0 {
        return Err(SimError::Calibration(
            "singular fit: all sample sizes are equal".into(),
        ));
    }
    let slope = sxy / sxx;
    if slope <= 0.0 {
        return Err(SimError::Calibration(format!(
            "non-physical fit: slope {slope} implies non-positive bandwidth"
        )));
    }
    let intercept = (mean_y - slope * mean_x).max(0.0);
    let model = LinkModel::new(name, intercept, 1.0 / slope)?;
    let rows: Vec<CalibrationRow> = samples
        .iter()
        .map(|&(bytes, observed)| {
            let predicted = model.transfer_time(bytes).secs();
            CalibrationRow {
                bytes,
                observed,
                predicted,
                rel_err: (predicted - observed).abs() / observed,
            }
        })
        .collect();
    let max_rel_err = rows.iter().map(|r| r.rel_err).fold(0.0, f64::max);
    Ok(CalibrationReport {
        model,
        rows,
        max_rel_err,
    })
}

/// Integer-valued distribution for turn counts and per-turn token counts.
/// Samples are clamped to >= 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CountDist {
    Constant(u64),
    Uniform { min: u64, max: u64 },
    Gaussian { mean: f64, std: f64 },
}

impl CountDist {
    pub fn validate(&self, what: &str) -> Result<(), SimError> {
        match self {
            CountDist::Constant(v) => {
                if *v == 0 {
                    return Err(SimError::config(format!("{what}: count must be >= 1")));
                }
            }
            CountDist::Uniform { min, max } => {
                if *min == 0 || min > max {
                    return Err(SimError::config(format!(
                        "{what}: uniform range [{min}, {max}] must satisfy 1 <= min <= max"
                    )));
                }
            }
            CountDist::Gaussian { mean, std } => {
                if !mean.is_finite() || !std.is_finite() || *mean < 1.0 || *std < 0.0 {
                    return Err(SimError::config(format!(
                        "{what}: gaussian(mean={mean}, std={std}) must have mean >= 1, std >= 0"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut ChaCha12Rng) -> u64 {
        match self {
            CountDist::Constant(v) => *v,
            CountDist::Uniform { min, max } => rng.gen_range(*min..=*max),
            CountDist::Gaussian { mean, std } => {
                use rand_distr::Distribution;
                let normal = rand_distr::Normal::new(*mean, *std).expect("validated");
                (normal.sample(rng).round() as i64).max(1) as u64
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            CountDist::Constant(v) => *v as f64,
            CountDist::Uniform { min, max } => (*min + *max) as f64 / 2.0,
            CountDist::Gaussian { mean, .. } => *mean,
        }
    }
}

/// How a trajectory's reward is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostClass {
    RuleBased,
    CodeSandbox,
    LlmJudge,
}

impl CostClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            CostClass::RuleBased => "rule_based",
            CostClass::CodeSandbox => "code_sandbox",
            CostClass::LlmJudge => "llm_judge",
        }
    }
}

/// One agentic task family in the workload mix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub tag: String,
    /// Sampling weight within the task mix.
    #[serde(default = "default_weight")]
    pub weight: f64,
    /// Routing tag for hardware affinity; defaults to `tag`.
    #[serde(default)]
    pub affinity_tag: Option<String>,
    pub turns: CountDist,
    pub prompt_tokens_per_turn: CountDist,
    pub response_tokens_per_turn: CountDist,
    pub env_reset: LatencyDistribution,
    pub env_step: LatencyDistribution,
    /// Probability that a reset hard-fails the environment (fail-stop);
    /// distinct from the fail-slow penalty inside the latency distribution.
    #[serde(default)]
    pub env_abort_prob: f64,
    #[serde(default = "default_cost_class")]
    pub reward: CostClass,
}

fn default_weight() -> f64 {
    1.0
}

fn default_cost_class() -> CostClass {
    CostClass::RuleBased
}

impl TaskSpec {
    pub fn affinity(&self) -> &str {
        self.affinity_tag.as_deref().unwrap_or(&self.tag)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.tag.is_empty() {
            return Err(SimError::config("task tag must be non-empty"));
        }
        if !self.weight.is_finite() || self.weight <= 0.0 {
            return Err(SimError::config(format!(
                "task '{}': weight must be positive",
                self.tag
            )));
        }
        if !(0.0..=1.0).contains(&self.env_abort_prob) {
            return Err(SimError::config(format!(
                "task '{}': env_abort_prob must be in [0, 1]",
                self.tag
            )));
        }
        self.turns.validate(&format!("task '{}' turns", self.tag))?;
        self.prompt_tokens_per_turn
            .validate(&format!("task '{}' prompt tokens", self.tag))?;
        self.response_tokens_per_turn
            .validate(&format!("task '{}' response tokens", self.tag))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::StreamRegistry;

    fn rel_eq(a: f64, b: f64, tol: f64) {
        assert!(
            ((a - b) / b).abs() <= tol,
            "expected {b}, got {a} (rel err {})",
            ((a - b) / b).abs()
        );
    }

    #[test]
    fn prefill_time_matches_hand_calculation() {
        // 1000 tokens on an 8e9-param model: 1.6e13 FLOPs over
        // 989.5e12 * 0.4 = 3.958e14 FLOP/s => 0.04042446 s.
        let model = ModelSpec::new("m", 8e9, 1e5).unwrap();
        let t = prefill_time(1000, &model, &HardwareProfile::h800());
        rel_eq(t.secs(), 0.040424456, 1e-6);
        let t20 = prefill_time(1000, &model, &HardwareProfile::h20());
        rel_eq(t20.secs(), 0.27027027, 1e-6);
        // H800 is faster by exactly the TFLOPS ratio at equal mfu.
        rel_eq(t20.secs() / t.secs(), 989.5 / 148.0, 1e-9);
    }

    #[test]
    fn zero_parameter_model_rejected() {
        assert!(ModelSpec::new("bad", 0.0, 1.0).is_err());
    }

    #[test]
    fn decode_step_weight_read_floor() {
        // 16e9 weight bytes over 4e12 * 0.6 B/s = 6.667 ms;
        // over 3.35e12 * 0.6 = 7.960 ms.
        let model = ModelSpec::new("m", 8e9, 1e5).unwrap();
        let h20 = decode_step_time(1, &model, &HardwareProfile::h20());
        let h800 = decode_step_time(1, &model, &HardwareProfile::h800());
        rel_eq(h20.secs(), 0.0066666667, 1e-6);
        rel_eq(h800.secs(), 0.0079601990, 1e-6);
        assert!(h20 < h800, "bandwidth-optimized device must decode faster");
        // batch 1 equals the floor exactly
        assert_eq!(h20.secs(), model.weight_bytes() / (4e12 * 0.6));
    }

    #[test]
    fn decode_step_grows_linearly_past_crossover() {
        let model = ModelSpec::new("m", 8e9, 1e5).unwrap();
        let hw = HardwareProfile::h20();
        let crossover = decode_crossover_batch(&model, &hw);
        rel_eq(crossover, 24.6667, 1e-3);
        let b1 = (crossover.ceil() as u64) * 2;
        let t1 = decode_step_time(b1, &model, &hw);
        let t2 = decode_step_time(b1 * 2, &model, &hw);
        rel_eq(t2.secs() / t1.secs(), 2.0, 1e-9);
    }

    #[test]
    fn train_step_time_matches_hand_calculation() {
        // 1e6 tokens * 6 * 8e9 params = 4.8e16 FLOPs over 32 H800 at mfu 0.4
        // = 1.26656e16 FLOP/s => 3.7898 s.
        let model = ModelSpec::new("m", 8e9, 1e5).unwrap();
        let pool = [DevicePool {
            profile: HardwareProfile::h800(),
            devices: 32,
        }];
        let t = train_step_time(1_000_000, &model, &pool).unwrap();
        rel_eq(t.secs(), 3.7897993, 1e-6);

        // doubling the pool halves the time exactly
        let double = [DevicePool {
            profile: HardwareProfile::h800(),
            devices: 64,
        }];
        let t2 = train_step_time(1_000_000, &model, &double).unwrap();
        rel_eq(t.secs() / t2.secs(), 2.0, 1e-9);

        // zero-token batch costs nothing
        let z = train_step_time(0, &model, &pool).unwrap();
        assert_eq!(z.secs(), 0.0);

        assert!(train_step_time(1, &model, &[]).is_err());
    }

    /// Independent least-squares oracle: solve the unnormalized 2x2 normal
    /// equations by Cramer's rule (a different route than the centered
    /// formula used by the implementation).
    fn normal_equation_fit(samples: &[(f64, f64)]) -> (f64, f64) {
        let n = samples.len() as f64;
        let sx: f64 = samples.iter().map(|(x, _)| x).sum();
        let sy: f64 = samples.iter().map(|(_, y)| y).sum();
        let sxx: f64 = samples.iter().map(|(x, _)| x * x).sum();
        let sxy: f64 = samples.iter().map(|(x, y)| x * y).sum();
        let det = n * sxx - sx * sx;
        let intercept = (sy * sxx - sx * sxy) / det;
        let slope = (n * sxy - sx * sy) / det;
        (intercept, slope)
    }

    #[test]
    fn calibrate_link_matches_normal_equations() {
        for samples in [rdma_reference_samples(), tcp_reference_samples()] {
            let report = calibrate_link("link", &samples).unwrap();
            let (intercept, slope) = normal_equation_fit(&samples);
            rel_eq(report.model.eff_bandwidth, 1.0 / slope, 1e-9);
            rel_eq(report.model.fixed_overhead, intercept.max(0.0), 1e-9);
        }
    }

    #[test]
    fn calibrated_reference_links_have_expected_shape() {
        let rdma = calibrate_link("RDMA", &rdma_reference_samples()).unwrap();
        // ~11 GB/s with a few seconds of fixed overhead
        assert!(rdma.model.eff_bandwidth > 9e9 && rdma.model.eff_bandwidth < 13e9);
        assert!(rdma.model.fixed_overhead > 2.0 && rdma.model.fixed_overhead < 5.0);

        let tcp = calibrate_link("TCP", &tcp_reference_samples()).unwrap();
        // ~2 GB/s with near-zero overhead
        assert!(tcp.model.eff_bandwidth > 1.8e9 && tcp.model.eff_bandwidth < 2.2e9);
        assert!(tcp.model.fixed_overhead < 0.5);

        // every observed row reproduced within 15%
        assert!(rdma.max_rel_err < 0.15, "rdma max err {}", rdma.max_rel_err);
        assert!(tcp.max_rel_err < 0.15, "tcp max err {}", tcp.max_rel_err);
    }

    #[test]
    fn calibrate_rejects_degenerate_input() {
        assert!(calibrate_link("x", &[(1e9, 1.0)]).is_err());
        assert!(calibrate_link("x", &[(1e9, 1.0), (1e9, 2.0)]).is_err());
    }

    #[test]
    fn durations_are_scale_invariant_under_unit_changes() {
        // bytes expressed in GB with bandwidth in GB/s gives the same time
        let link_b = LinkModel::new("l", 1.0, 2e9).unwrap();
        let link_gb = LinkModel::new("l", 1.0, 2.0).unwrap();
        rel_eq(
            link_b.transfer_time(61.02e9).secs(),
            link_gb.transfer_time(61.02).secs(),
            1e-12,
        );
    }

    #[test]
    fn affinity_direction_from_spec_sheets() {
        // For any model fitting both devices at equal efficiency factors:
        // prefill is faster on the compute-optimized device, decode on the
        // bandwidth-optimized one.
        for params in [4e9, 8e9, 30e9] {
            let model = ModelSpec::new("m", params, 1e5).unwrap();
            assert!(
                prefill_time(4096, &model, &HardwareProfile::h800())
                    < prefill_time(4096, &model, &HardwareProfile::h20())
            );
            assert!(
                decode_step_time(4, &model, &HardwareProfile::h20())
                    < decode_step_time(4, &model, &HardwareProfile::h800())
            );
        }
    }

    #[test]
    fn count_dist_sampling_respects_bounds() {
        let mut reg = StreamRegistry::new(5);
        let d = CountDist::Uniform { min: 30, max: 50 };
        for _ in 0..1000 {
            let v = d.sample(reg.stream("turns"));
            assert!((30..=50).contains(&v));
        }
        let g = CountDist::Gaussian { mean: 2.0, std: 5.0 };
        for _ in 0..1000 {
            assert!(g.sample(reg.stream("tok")) >= 1);
        }
        assert!(CountDist::Uniform { min: 0, max: 5 }.validate("x").is_err());
        assert!(CountDist::Uniform { min: 7, max: 5 }.validate("x").is_err());
    }
}
