//! Numeric verification suites.
//!
//! Five independent properties of the streaming encoder are exercised over
//! several seeds and memory capacities:
//!
//! * `equivalence`: frame-by-frame encoding matches the dense causal
//!   reference on the same weights and inputs;
//! * `causality`: replacing later frames never changes earlier outputs,
//!   for the streaming encoder and for the masked dense reference;
//! * `prefix`: stopping after k frames and continuing, or resetting and
//!   re-running, reproduces the one-shot outputs exactly;
//! * `gate_off`: with the fusion gates at zero, every frame reduces to the
//!   memoryless image baseline;
//! * `memory_length`: each layer's pool holds exactly min(t, M) frames
//!   after frame t.
//!
//! Results come back per suite with one line per broken case; a fault can
//! be injected into the streaming side to prove the suites have teeth.

use crate::config::{Dtype, ModelConfig, TaskMode};
use crate::encoder::{Encoder, Fault, FrameFeatures};
use crate::error::Result;
use crate::flops::synthetic_frames;
use crate::oracle::{clip_forward, image_vit_forward, TemporalMask};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{MacCounter, Tensor};

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub seeds: Vec<u64>,
    /// Frames per sequence; at least 4 so bounded memories actually evict.
    pub frames: usize,
    pub jobs: usize,
    pub dtype: Dtype,
    pub fault: Option<Fault>,
}

impl Default for VerifyOptions {
    fn default() -> VerifyOptions {
        VerifyOptions { seeds: vec![0, 1, 2], frames: 6, jobs: 1, dtype: Dtype::F32, fault: None }
    }
}

#[derive(Clone, Debug, Default)]
struct SuiteOutcome {
    cases: usize,
    failures: Vec<String>,
}

impl SuiteOutcome {
    fn case(&mut self, failure: Option<String>) {
        self.cases += 1;
        if let Some(msg) = failure {
            self.failures.push(msg);
        }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    pub failures: Vec<String>,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct VerifyReport {
    pub suites: Vec<SuiteResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for s in &self.suites {
            if s.passed() {
                out.push_str(&format!("{}: pass ({} cases)\n", s.name, s.cases));
            } else {
                out.push_str(&format!(
                    "{}: FAIL ({}/{} cases)\n",
                    s.name,
                    s.failures.len(),
                    s.cases
                ));
                for f in s.failures.iter().take(4) {
                    out.push_str(&format!("  {f}\n"));
                }
                if s.failures.len() > 4 {
                    out.push_str(&format!("  ... {} more\n", s.failures.len() - 4));
                }
            }
        }
        out
    }
}

const SUITE_NAMES: [&str; 5] =
    ["equivalence", "causality", "prefix", "gate_off", "memory_length"];

fn suite_config(
    seed: u64,
    capacity: Option<usize>,
    mode: TaskMode,
    window: Option<usize>,
    fusion_init: f64,
) -> ModelConfig {
    let mut c = ModelConfig::compact();
    c.image_h = 16;
    c.image_w = 16;
    c.patch = 4;
    c.channels = 16;
    c.heads = 2;
    c.layers = 2;
    c.stages = 2;
    c.window = window;
    c.memory_capacity = capacity;
    c.fusion_init = fusion_init;
    c.mode = mode;
    c.seed = seed;
    c
}

fn tolerance<T: Scalar>() -> f64 {
    if T::NAME == "f32" {
        1e-5
    } else {
        1e-12
    }
}

fn capacity_word(capacity: Option<usize>) -> String {
    match capacity {
        Some(m) => m.to_string(),
        None => "unbounded".to_string(),
    }
}

fn compare_features<T: Scalar>(
    what: &str,
    got: &[FrameFeatures<T>],
    want_tokens: &[crate::attention::TokenGrid<T>],
    want_pyramids: Option<&[crate::encoder::FeaturePyramid<T>]>,
) -> Option<String> {
    let tol = tolerance::<T>();
    let mut worst = 0.0f64;
    for (g, w) in got.iter().zip(want_tokens) {
        worst = worst.max(g.tokens.max_abs_diff(w));
    }
    if let Some(pyrs) = want_pyramids {
        for (g, w) in got.iter().zip(pyrs) {
            let gp = g.pyramid.as_ref().expect("frame mode produces pyramids");
            for (a, b) in gp.levels.iter().zip(&w.levels) {
                worst = worst.max(a.max_abs_diff(b));
            }
        }
    }
    if worst > tol {
        Some(format!("{what}: max deviation {worst:.3e} over tolerance {tol:.0e}"))
    } else {
        None
    }
}

fn equivalence_suite<T: Scalar>(
    seed: u64,
    frames: usize,
    fault: Option<Fault>,
    out: &mut SuiteOutcome,
) -> Result<()> {
    let cases = [
        (TaskMode::Sequence, Some(1)),
        (TaskMode::Sequence, Some(2)),
        (TaskMode::Sequence, None),
        (TaskMode::Frame, Some(2)),
    ];
    for (mode, capacity) in cases {
        let cfg = suite_config(seed, capacity, mode, None, 0.05);
        let inputs = synthetic_frames::<T>(&cfg, frames);
        let mut enc = Encoder::<T>::from_config(&cfg)?;
        enc.inject_fault(fault);
        let got = enc.encode_sequence(&inputs)?;
        let clip = clip_forward(
            &inputs,
            &cfg,
            enc.weights(),
            TemporalMask::Causal,
            &MacCounter::disabled(),
        )?;
        let what = format!("seed {seed} {mode} capacity {}", capacity_word(capacity));
        out.case(compare_features(&what, &got, &clip.frames, clip.pyramids.as_deref()));
    }
    Ok(())
}

fn causality_suite<T: Scalar>(
    seed: u64,
    frames: usize,
    fault: Option<Fault>,
    out: &mut SuiteOutcome,
) -> Result<()> {
    for capacity in [Some(2), None] {
        let cfg = suite_config(seed, capacity, TaskMode::Sequence, None, 0.05);
        let a = synthetic_frames::<T>(&cfg, frames);
        let mut b = a.clone();
        let keep = frames / 2;
        let mut rng = Rng::seed_from(seed ^ 0x5eed);
        for f in b.iter_mut().skip(keep) {
            *f = Tensor::from_fn(f.shape(), |_| T::from_f64(rng.normal()));
        }

        let counter = MacCounter::disabled();
        let reference = Encoder::<T>::from_config(&cfg)?;
        let ca = clip_forward(&a, &cfg, reference.weights(), TemporalMask::Causal, &counter)?;
        let cb = clip_forward(&b, &cfg, reference.weights(), TemporalMask::Causal, &counter)?;
        let oracle_ok = ca.frames[..keep]
            .iter()
            .zip(&cb.frames[..keep])
            .all(|(x, y)| x.bits_eq(y));

        let mut ea = Encoder::<T>::from_config(&cfg)?;
        ea.inject_fault(fault);
        let oa = ea.encode_sequence(&a)?;
        let mut eb = Encoder::<T>::from_config(&cfg)?;
        eb.inject_fault(fault);
        let ob = eb.encode_sequence(&b)?;
        let stream_ok = oa[..keep]
            .iter()
            .zip(&ob[..keep])
            .all(|(x, y)| x.tokens.bits_eq(&y.tokens));

        let failure = if oracle_ok && stream_ok {
            None
        } else {
            Some(format!(
                "seed {seed} capacity {}: prefix changed (reference intact: {oracle_ok}, streaming intact: {stream_ok})",
                capacity_word(capacity)
            ))
        };
        out.case(failure);
    }
    Ok(())
}

fn prefix_suite<T: Scalar>(
    seed: u64,
    frames: usize,
    fault: Option<Fault>,
    out: &mut SuiteOutcome,
) -> Result<()> {
    let cfg = suite_config(seed, Some(2), TaskMode::Sequence, None, 0.05);
    let inputs = synthetic_frames::<T>(&cfg, frames);
    let keep = frames / 2;

    let mut one_shot = Encoder::<T>::from_config(&cfg)?;
    one_shot.inject_fault(fault);
    let full = one_shot.encode_sequence(&inputs)?;

    let mut resumed = Encoder::<T>::from_config(&cfg)?;
    resumed.inject_fault(fault);
    let mut parts = resumed.encode_sequence(&inputs[..keep])?;
    parts.extend(resumed.encode_sequence(&inputs[keep..])?);
    let resumed_ok = full
        .iter()
        .zip(&parts)
        .all(|(x, y)| x.tokens.bits_eq(&y.tokens));
    out.case(if resumed_ok {
        None
    } else {
        Some(format!("seed {seed}: pausing after frame {keep} changed later outputs"))
    });

    one_shot.reset();
    let again = one_shot.encode_sequence(&inputs)?;
    let reset_ok = full
        .iter()
        .zip(&again)
        .all(|(x, y)| x.tokens.bits_eq(&y.tokens));
    out.case(if reset_ok {
        None
    } else {
        Some(format!("seed {seed}: reset re-run diverged"))
    });
    Ok(())
}

fn gate_off_suite<T: Scalar>(
    seed: u64,
    frames: usize,
    fault: Option<Fault>,
    out: &mut SuiteOutcome,
) -> Result<()> {
    let cases = [(TaskMode::Sequence, None), (TaskMode::Frame, Some(3))];
    for (mode, window) in cases {
        let cfg = suite_config(seed, Some(2), mode, window, 0.0);
        let inputs = synthetic_frames::<T>(&cfg, frames);
        let mut enc = Encoder::<T>::from_config(&cfg)?;
        enc.inject_fault(fault);
        let got = enc.encode_sequence(&inputs)?;

        let counter = MacCounter::disabled();
        let tol = tolerance::<T>();
        let mut worst = 0.0f64;
        for (frame, g) in inputs.iter().zip(&got) {
            let base = image_vit_forward(frame, &cfg, enc.weights(), &counter)?;
            worst = worst.max(g.tokens.max_abs_diff(&base.tokens));
            if let (Some(gp), Some(bp)) = (&g.pyramid, &base.pyramid) {
                for (a, b) in gp.levels.iter().zip(&bp.levels) {
                    worst = worst.max(a.max_abs_diff(b));
                }
            }
        }
        out.case(if worst <= tol {
            None
        } else {
            Some(format!(
                "seed {seed} {mode}: zero gates deviate from the image baseline by {worst:.3e}"
            ))
        });
    }
    Ok(())
}

fn memory_length_suite<T: Scalar>(
    seed: u64,
    frames: usize,
    fault: Option<Fault>,
    out: &mut SuiteOutcome,
) -> Result<()> {
    for capacity in [Some(1), Some(3), None] {
        let cfg = suite_config(seed, capacity, TaskMode::Sequence, None, 0.05);
        let inputs = synthetic_frames::<T>(&cfg, frames);
        let mut enc = Encoder::<T>::from_config(&cfg)?;
        enc.inject_fault(fault);
        let mut failure = None;
        for (t, frame) in inputs.iter().enumerate() {
            enc.encode_frame(frame)?;
            let want = match capacity {
                Some(m) => (t + 1).min(m),
                None => t + 1,
            };
            if let Some(got) = enc.pool_lengths().iter().find(|len| **len != want) {
                failure = Some(format!(
                    "seed {seed} capacity {}: after frame {t} a pool holds {got} frames, want {want}",
                    capacity_word(capacity)
                ));
                break;
            }
        }
        out.case(failure);
    }
    Ok(())
}

fn seed_outcomes<T: Scalar>(
    seed: u64,
    frames: usize,
    fault: Option<Fault>,
) -> Result<[SuiteOutcome; 5]> {
    let mut outs: [SuiteOutcome; 5] = Default::default();
    equivalence_suite::<T>(seed, frames, fault, &mut outs[0])?;
    causality_suite::<T>(seed, frames, fault, &mut outs[1])?;
    prefix_suite::<T>(seed, frames, fault, &mut outs[2])?;
    gate_off_suite::<T>(seed, frames, fault, &mut outs[3])?;
    memory_length_suite::<T>(seed, frames, fault, &mut outs[4])?;
    Ok(outs)
}

/// Maps `f` over `items` on up to `jobs` scoped threads, preserving order.
fn parallel_map<I, O, F>(jobs: usize, items: Vec<I>, f: F) -> Vec<O>
where
    I: Send,
    O: Send,
    F: Fn(I) -> O + Sync,
{
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs <= 1 {
        return items.into_iter().map(f).collect();
    }
    let total = items.len();
    let mut chunks: Vec<Vec<I>> = (0..jobs).map(|_| Vec::new()).collect();
    let per = total.div_ceil(jobs);
    for (i, item) in items.into_iter().enumerate() {
        chunks[i / per].push(item);
    }
    let f = &f;
    let mut results: Vec<Vec<O>> = Vec::with_capacity(jobs);
    std::thread::scope(|scope| {
        let handles: Vec<_> = chunks
            .into_iter()
            .map(|chunk| scope.spawn(move || chunk.into_iter().map(f).collect::<Vec<O>>()))
            .collect();
        for h in handles {
            results.push(h.join().expect("verification worker panicked"));
        }
    });
    results.into_iter().flatten().collect()
}

fn run_suites<T: Scalar>(options: &VerifyOptions) -> Result<VerifyReport> {
    let per_seed = parallel_map(options.jobs, options.seeds.clone(), |seed| {
        seed_outcomes::<T>(seed, options.frames.max(4), options.fault)
    });
    let mut merged: [SuiteOutcome; 5] = Default::default();
    for outcome in per_seed {
        let outcome = outcome?;
        for (m, o) in merged.iter_mut().zip(outcome) {
            m.cases += o.cases;
            m.failures.extend(o.failures);
        }
    }
    Ok(VerifyReport {
        suites: SUITE_NAMES
            .into_iter()
            .zip(merged)
            .map(|(name, o)| SuiteResult { name, cases: o.cases, failures: o.failures })
            .collect(),
    })
}

pub fn run_verification(options: &VerifyOptions) -> Result<VerifyReport> {
    match options.dtype {
        Dtype::F32 => run_suites::<f32>(options),
        Dtype::F64 => run_suites::<f64>(options),
    }
}
