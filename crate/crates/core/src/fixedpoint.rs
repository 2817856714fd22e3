//! 32-bit fixed-point inference for trained networks.
//!
//! Batch norm is folded into the preceding affine layer, every weight and
//! bias is quantized to a signed 32-bit word with `F` fractional bits
//! (round half to even), and the forward pass runs in integer arithmetic:
//! 64-bit accumulation at `2F` fractional bits, rescale back to `F`, and
//! saturation to the 32-bit range with a diagnostic flag. The output clamp
//! uses bounds tightened inward so the dequantized input can never leave
//! the admissible interval.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Affine, ClampBounds, LaguerreHead, MlpParams};

/// Number format: one sign bit, `31 - frac_bits` integer bits, `frac_bits`
/// fractional bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedFormat {
    pub frac_bits: u32,
}

pub const DEFAULT_FRAC_BITS: u32 = 16;

impl Default for FixedFormat {
    fn default() -> Self {
        Self {
            frac_bits: DEFAULT_FRAC_BITS,
        }
    }
}

impl FixedFormat {
    pub fn new(frac_bits: u32) -> Result<Self> {
        if !(1..=30).contains(&frac_bits) {
            return Err(Error::InvalidParameter(format!(
                "fractional bits must lie in 1..=30, got {frac_bits}"
            )));
        }
        Ok(Self { frac_bits })
    }

    pub fn scale(&self) -> f64 {
        (1i64 << self.frac_bits) as f64
    }

    /// Quantize with round half to even; `parameter` names the tensor in
    /// range errors.
    pub fn to_fixed(&self, value: f64, parameter: &str) -> Result<i32> {
        let scaled = (value * self.scale()).round_ties_even();
        if scaled < i32::MIN as f64 || scaled > i32::MAX as f64 || !scaled.is_finite() {
            return Err(Error::QuantizationRange {
                parameter: parameter.to_string(),
                value,
                limit: i32::MAX as f64 / self.scale(),
            });
        }
        Ok(scaled as i32)
    }

    pub fn to_float(&self, q: i32) -> f64 {
        q as f64 / self.scale()
    }
}

/// Shift right by `shift` bits, rounding half to even.
fn rshift_round_even(v: i64, shift: u32) -> i64 {
    let floor = v >> shift;
    let rem = v - (floor << shift);
    let half = 1i64 << (shift - 1);
    match rem.cmp(&half) {
        std::cmp::Ordering::Less => floor,
        std::cmp::Ordering::Greater => floor + 1,
        std::cmp::Ordering::Equal => floor + (floor & 1),
    }
}

fn saturate(v: i64, saturated: &mut bool) -> i32 {
    if v > i32::MAX as i64 {
        *saturated = true;
        i32::MAX
    } else if v < i32::MIN as i64 {
        *saturated = true;
        i32::MIN
    } else {
        v as i32
    }
}

/// Fold each hidden layer's batch norm (running statistics) into its affine
/// transform, leaving a plain affine-ReLU stack plus the output layer.
pub fn fold_batchnorm(params: &MlpParams) -> Vec<Affine> {
    let mut layers = Vec::with_capacity(params.hidden.len() + 1);
    for layer in &params.hidden {
        let a = &layer.affine;
        let bn = &layer.bn;
        let mut w = vec![0.0; a.w.len()];
        let mut b = vec![0.0; a.b.len()];
        for o in 0..a.out_dim {
            let s = bn.gamma[o] / (bn.running_var[o] + bn.eps).sqrt();
            for i in 0..a.in_dim {
                w[o * a.in_dim + i] = a.w[o * a.in_dim + i] * s;
            }
            b[o] = (a.b[o] - bn.running_mean[o]) * s + bn.beta[o];
        }
        layers.push(Affine {
            w,
            b,
            in_dim: a.in_dim,
            out_dim: a.out_dim,
        });
    }
    layers.push(params.output.clone());
    layers
}

/// Inference-mode forward through the folded float network (no clamp/head).
pub fn forward_folded(layers: &[Affine], x: &[f64]) -> Vec<f64> {
    let mut cur = x.to_vec();
    for (li, layer) in layers.iter().enumerate() {
        let mut next = layer.b.clone();
        for o in 0..layer.out_dim {
            for i in 0..layer.in_dim {
                next[o] += layer.w[o * layer.in_dim + i] * cur[i];
            }
        }
        if li + 1 < layers.len() {
            for v in &mut next {
                *v = v.max(0.0);
            }
        }
        cur = next;
    }
    cur
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantLayer {
    pub w: Vec<i32>,
    pub b: Vec<i32>,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// Optional Laguerre first-input head in fixed point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantHead {
    pub row0: Vec<i32>,
    pub u_ss: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedNet {
    pub format: FixedFormat,
    pub layers: Vec<QuantLayer>,
    pub head: Option<QuantHead>,
    /// Clamp bounds tightened inward: lower rounded up, upper rounded down.
    pub clamp_lo: i32,
    pub clamp_hi: i32,
}

/// Largest |quantized - exact| over all folded parameters, in float units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantReport {
    pub max_abs_error: f64,
    pub parameters: usize,
}

/// Fold and quantize a trained network for fixed-point inference.
pub fn quantize_net(
    params: &MlpParams,
    head: Option<&LaguerreHead>,
    bounds: &ClampBounds,
    format: FixedFormat,
) -> Result<(QuantizedNet, QuantReport)> {
    let folded = fold_batchnorm(params);
    let mut max_err = 0.0f64;
    let mut count = 0usize;
    let mut quant = |v: f64, name: &str| -> Result<i32> {
        let q = format.to_fixed(v, name)?;
        max_err = max_err.max((format.to_float(q) - v).abs());
        count += 1;
        Ok(q)
    };
    let mut layers = Vec::with_capacity(folded.len());
    for (li, layer) in folded.iter().enumerate() {
        let mut w = Vec::with_capacity(layer.w.len());
        let mut b = Vec::with_capacity(layer.b.len());
        for (k, &v) in layer.w.iter().enumerate() {
            w.push(quant(v, &format!("layer {li} weight {k}"))?);
        }
        for (k, &v) in layer.b.iter().enumerate() {
            b.push(quant(v, &format!("layer {li} bias {k}"))?);
        }
        layers.push(QuantLayer {
            w,
            b,
            in_dim: layer.in_dim,
            out_dim: layer.out_dim,
        });
    }
    let qhead = match head {
        Some(h) => {
            let mut row0 = Vec::with_capacity(h.m);
            for (k, &v) in h.row(0).iter().enumerate() {
                row0.push(quant(v, &format!("head row 0 coefficient {k}"))?);
            }
            Some(QuantHead {
                row0,
                u_ss: quant(h.u_ss, "head u_ss")?,
            })
        }
        None => None,
    };
    let scale = format.scale();
    let clamp_lo = (bounds.u_min * scale).ceil();
    let clamp_hi = (bounds.u_max * scale).floor();
    if clamp_lo > i32::MAX as f64 || clamp_hi > i32::MAX as f64 || clamp_lo > clamp_hi {
        return Err(Error::QuantizationRange {
            parameter: "clamp bounds".to_string(),
            value: bounds.u_max,
            limit: i32::MAX as f64 / scale,
        });
    }
    Ok((
        QuantizedNet {
            format,
            layers: layers
                .into_iter()
                .collect(),
            head: qhead,
            clamp_lo: clamp_lo as i32,
            clamp_hi: clamp_hi as i32,
        },
        QuantReport {
            max_abs_error: max_err,
            parameters: count,
        },
    ))
}

impl QuantizedNet {
    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    /// Quantize a float state for the integer forward pass.
    pub fn quantize_state(&self, x: &[f64]) -> Result<Vec<i32>> {
        x.iter()
            .enumerate()
            .map(|(i, &v)| self.format.to_fixed(v, &format!("state component {i}")))
            .collect()
    }

    /// Integer forward pass: returns the fixed-point control input and a
    /// flag marking whether any accumulator saturated.
    pub fn forward_fixed(&self, x_q: &[i32]) -> Result<(i32, bool)> {
        if x_q.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x_q.len(),
            });
        }
        let f = self.format.frac_bits;
        let mut saturated = false;
        let mut cur: Vec<i32> = x_q.to_vec();
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let mut next = Vec::with_capacity(layer.out_dim);
            for o in 0..layer.out_dim {
                // Products carry 2F fractional bits; the bias is promoted.
                let mut acc = (layer.b[o] as i64) << f;
                for i in 0..layer.in_dim {
                    acc += layer.w[o * layer.in_dim + i] as i64 * cur[i] as i64;
                }
                let mut v = rshift_round_even(acc, f);
                if li < last && v < 0 {
                    v = 0;
                }
                next.push(saturate(v, &mut saturated));
            }
            cur = next;
        }
        let raw = match &self.head {
            Some(h) => {
                if cur.len() != h.row0.len() {
                    return Err(Error::DimensionMismatch {
                        expected: h.row0.len(),
                        got: cur.len(),
                    });
                }
                let mut acc = (h.u_ss as i64) << f;
                for (w, x) in h.row0.iter().zip(&cur) {
                    acc += *w as i64 * *x as i64;
                }
                saturate(rshift_round_even(acc, f), &mut saturated)
            }
            None => cur[0],
        };
        Ok((raw.clamp(self.clamp_lo, self.clamp_hi), saturated))
    }

    /// Float control input at `x` via the integer pipeline.
    pub fn infer(&self, x: &[f64]) -> Result<(f64, bool)> {
        let xq = self.quantize_state(x)?;
        let (uq, sat) = self.forward_fixed(&xq)?;
        Ok((self.format.to_float(uq), sat))
    }

    pub fn save(&self, path: &std::path::Path, header: &[String]) -> Result<()> {
        #[derive(Serialize)]
        struct File<'a> {
            header: &'a [String],
            net: &'a QuantizedNet,
        }
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(f, &File { header, net: self })
            .map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct File {
            #[allow(dead_code)]
            header: Vec<String>,
            net: QuantizedNet,
        }
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let file: File = serde_json::from_reader(f).map_err(|e| Error::MalformedFile {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        FixedFormat::new(file.net.format.frac_bits)?;
        Ok(file.net)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub min_ns: f64,
    pub median_ns: f64,
    pub p99_ns: f64,
    pub evaluations: usize,
}

/// Time the integer forward pass over the given pre-quantized states.
/// Each repetition times one full sweep and contributes one per-evaluation
/// sample; at least 100 repetitions are taken.
pub fn bench_latency(net: &QuantizedNet, states: &[Vec<i32>], reps: usize) -> Result<LatencyStats> {
    if states.is_empty() {
        return Err(Error::EmptyDataset("no states to benchmark".into()));
    }
    let reps = reps.max(100);
    // Warmup pass, also ensuring the inputs are valid.
    for s in states {
        net.forward_fixed(s)?;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = std::time::Instant::now();
        let mut sink = 0i64;
        for s in states {
            let (u, _) = net.forward_fixed(s)?;
            sink = sink.wrapping_add(u as i64);
        }
        let dt = t0.elapsed().as_nanos() as f64 / states.len() as f64;
        std::hint::black_box(sink);
        samples.push(dt);
    }
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pick = |q: f64| samples[((samples.len() - 1) as f64 * q).round() as usize];
    Ok(LatencyStats {
        min_ns: samples[0],
        median_ns: pick(0.5),
        p99_ns: pick(0.99),
        evaluations: reps * states.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::laguerre::LaguerreBasis;
    use crate::nn::Mode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bounds() -> ClampBounds {
        ClampBounds {
            u_min: 0.1,
            u_max: 0.9,
        }
    }

    #[test]
    fn format_validation() {
        assert!(FixedFormat::new(0).is_err());
        assert!(FixedFormat::new(31).is_err());
        assert_eq!(FixedFormat::new(16).unwrap().scale(), 65536.0);
    }

    #[test]
    fn to_fixed_examples() {
        let f = FixedFormat::new(16).unwrap();
        assert_eq!(f.to_fixed(0.5, "t").unwrap(), 32768);
        assert_eq!(f.to_fixed(-1.0, "t").unwrap(), -65536);
        assert_eq!(f.to_fixed(0.0, "t").unwrap(), 0);
        // Ties round to even: 32768.5 -> 32768, 32769.5 -> 32770.
        assert_eq!(f.to_fixed(32768.5 / 65536.0, "t").unwrap(), 32768);
        assert_eq!(f.to_fixed(32769.5 / 65536.0, "t").unwrap(), 32770);
        // Range error names the parameter.
        let err = f.to_fixed(40000.0, "layer 0 weight 3").unwrap_err();
        match err {
            Error::QuantizationRange { parameter, .. } => {
                assert_eq!(parameter, "layer 0 weight 3")
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn rshift_rounds_half_to_even() {
        assert_eq!(rshift_round_even(10, 2), 2); // 2.5 -> 2 (even)
        assert_eq!(rshift_round_even(14, 2), 4); // 3.5 -> 4
        assert_eq!(rshift_round_even(9, 2), 2);
        assert_eq!(rshift_round_even(11, 2), 3);
        assert_eq!(rshift_round_even(-10, 2), -2); // -2.5 -> -2 (even)
        assert_eq!(rshift_round_even(-14, 2), -4); // -3.5 -> -4
        assert_eq!(rshift_round_even(-9, 2), -2);
        assert_eq!(rshift_round_even(-11, 2), -3);
    }

    #[test]
    fn folding_matches_inference_mode() {
        let mut p = MlpParams::init(2, &[6, 5], 3, 7);
        // Give the running statistics nontrivial values by a train pass.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs: Vec<f64> = (0..32).map(|_| rng.gen_range(-2.0..2.0)).collect();
        p.trunk_forward(&xs, 16, Mode::Train, None).unwrap();
        let folded = fold_batchnorm(&p);
        for _ in 0..50 {
            let x = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let direct = p.trunk_forward(&x, 1, Mode::Infer, None).unwrap();
            let via_fold = forward_folded(&folded, &x);
            for (a, b) in direct.iter().zip(&via_fold) {
                assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn fixed_point_tracks_float_inference() {
        let basis = LaguerreBasis::new(0.9, 4, 20).unwrap();
        let head = LaguerreHead::from_basis(&basis, 0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..20 {
            let mut p = MlpParams::init(2, &[20, 20], 4, seed);
            let xs: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
            p.trunk_forward(&xs, 32, Mode::Train, None).unwrap();
            let (q, report) = quantize_net(&p, Some(&head), &bounds(), FixedFormat::default())
                .unwrap();
            assert!(report.max_abs_error <= 0.5 / 65536.0);
            for _ in 0..20 {
                let x = [rng.gen_range(0.01..2.0), rng.gen_range(-20.0..0.0)];
                let float_u = p
                    .forward_lagnmpc_first(&head, &x, Mode::Infer, &bounds())
                    .unwrap();
                let (fixed_u, sat) = q.infer(&x).unwrap();
                assert!(!sat);
                assert!(
                    (float_u - fixed_u).abs() <= 1e-3,
                    "seed {seed}: float {float_u} fixed {fixed_u}"
                );
            }
        }
    }

    #[test]
    fn clamp_bounds_are_tightened_inward() {
        let p = MlpParams::init(2, &[4], 1, 0);
        let (q, _) = quantize_net(&p, None, &bounds(), FixedFormat::default()).unwrap();
        assert_eq!(q.clamp_lo, 6554); // ceil(0.1 * 65536 = 6553.6)
        assert_eq!(q.clamp_hi, 58982); // floor(0.9 * 65536 = 58982.4)
        assert!(q.format.to_float(q.clamp_lo) >= 0.1);
        assert!(q.format.to_float(q.clamp_hi) <= 0.9);
    }

    #[test]
    fn output_always_within_input_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for seed in 0..30 {
            let mut p = MlpParams::init(2, &[8], 1, seed);
            // Inflate weights to force the clamp from both sides.
            let n = p.trainable_len();
            let mut flat = vec![0.0; n];
            p.copy_trainable(&mut flat);
            for v in &mut flat {
                *v *= 40.0;
            }
            p.load_trainable(&flat);
            let (q, _) = quantize_net(&p, None, &bounds(), FixedFormat::default()).unwrap();
            for _ in 0..50 {
                let x = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
                let (u, _) = q.infer(&x).unwrap();
                assert!((0.1..=0.9).contains(&u), "u = {u}");
            }
        }
    }

    #[test]
    fn saturation_is_flagged() {
        let mut p = MlpParams::init(2, &[4], 1, 0);
        let n = p.trainable_len();
        // Saturate the first hidden accumulator: huge weight times a large
        // state overflows 32 bits at F = 16.
        let mut flat = vec![0.0; n];
        p.copy_trainable(&mut flat);
        flat[0] = 30000.0;
        p.load_trainable(&flat);
        let (q, _) = quantize_net(&p, None, &bounds(), FixedFormat::default()).unwrap();
        let (_, sat) = q.infer(&[2.0, 0.0]).unwrap();
        assert!(sat);
        let (_, sat) = q.infer(&[0.0, 0.0]).unwrap();
        assert!(!sat);
    }

    #[test]
    fn weight_file_roundtrips() {
        let basis = LaguerreBasis::new(0.9, 4, 20).unwrap();
        let head = LaguerreHead::from_basis(&basis, 0.4);
        let p = MlpParams::init(2, &[20, 20], 4, 11);
        let (q, _) = quantize_net(&p, Some(&head), &bounds(), FixedFormat::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.q.json");
        q.save(&path, &["config 1234".into()]).unwrap();
        let back = QuantizedNet::load(&path).unwrap();
        assert_eq!(q, back);
    }

    #[test]
    fn latency_stats_are_ordered() {
        let p = MlpParams::init(2, &[20, 20], 1, 0);
        let (q, _) = quantize_net(&p, None, &bounds(), FixedFormat::default()).unwrap();
        let states: Vec<Vec<i32>> = (0..64)
            .map(|i| vec![i * 1000, -i * 1000])
            .collect();
        let stats = bench_latency(&q, &states, 10).unwrap();
        assert!(stats.min_ns > 0.0);
        assert!(stats.min_ns <= stats.median_ns);
        assert!(stats.median_ns <= stats.p99_ns);
        assert_eq!(stats.evaluations, 100 * 64);
    }
}
