//! Multilayer-perceptron pose networks and Bin & Delta composition.
//!
//! Networks are plain fully connected stacks: affine map followed by an
//! activation per layer. Output heads use `pi * tanh` for axis-angle poses
//! (each component bounded by pi), L2 normalization for quaternions and a
//! softmax over key poses for Bin networks. Backpropagation is written out by
//! hand; [`Mlp::backward`] accumulates into an [`MlpGrads`].

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dictionary::{argmax, PoseDictionary};
use crate::error::{Error, Result};
use crate::pose::Representation;
use crate::so3::{exp_so3, AxisAngle, Rotation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    PiTanh,
    L2Normalize,
    Softmax,
    Linear,
}

impl Activation {
    fn apply(self, z: &DVector<f64>) -> DVector<f64> {
        match self {
            Activation::Relu => z.map(|v| v.max(0.0)),
            Activation::PiTanh => z.map(|v| PI * v.tanh()),
            Activation::L2Normalize => z / z.norm().max(1e-12),
            Activation::Softmax => {
                let m = z.max();
                let e = z.map(|v| (v - m).exp());
                let s = e.sum();
                e / s
            }
            Activation::Linear => z.clone(),
        }
    }

    /// Vector-Jacobian product: gradient at the pre-activation given the
    /// gradient at the output.
    fn backward(self, z: &DVector<f64>, a: &DVector<f64>, da: &DVector<f64>) -> DVector<f64> {
        match self {
            Activation::Relu => da.zip_map(z, |g, v| if v > 0.0 { g } else { 0.0 }),
            Activation::PiTanh => da.zip_map(z, |g, v| {
                let t = v.tanh();
                g * PI * (1.0 - t * t)
            }),
            Activation::L2Normalize => (da - a * a.dot(da)) / z.norm().max(1e-12),
            Activation::Softmax => {
                let s = a.dot(da);
                a.zip_map(da, |p, g| p * (g - s))
            }
            Activation::Linear => da.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

/// Fully connected network.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
    seed: u64,
}

/// Activations recorded during a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    inputs: Vec<DVector<f64>>,
    pre: Vec<DVector<f64>>,
    output: DVector<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.output.as_slice()
    }

    /// Pre-activation of the last layer (the logits of a softmax head).
    pub fn last_pre_activation(&self) -> &[f64] {
        self.pre.last().expect("networks have at least one layer").as_slice()
    }
}

/// Parameter gradients, shaped like the network.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<DMatrix<f64>>,
    pub bias: Vec<DVector<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net
                .layers
                .iter()
                .map(|l| DMatrix::zeros(l.weights.nrows(), l.weights.ncols()))
                .collect(),
            bias: net.layers.iter().map(|l| DVector::zeros(l.bias.len())).collect(),
        }
    }

    pub fn clear(&mut self) {
        self.weights.iter_mut().for_each(|w| w.fill(0.0));
        self.bias.iter_mut().for_each(|b| b.fill(0.0));
    }

    pub fn scale(&mut self, s: f64) {
        self.weights.iter_mut().for_each(|w| *w *= s);
        self.bias.iter_mut().for_each(|b| *b *= s);
    }
}

#[derive(Serialize, Deserialize)]
struct MlpHeader {
    format: String,
    version: u32,
    sizes: Vec<usize>,
    activations: Vec<Activation>,
    seed: u64,
}

const MLP_FORMAT: &str = "orient-geo-mlp";
const MLP_VERSION: u32 = 1;

impl Mlp {
    pub fn new(layers: Vec<Layer>, seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for l in &layers {
            if l.bias.len() != l.weights.nrows() {
                return Err(Error::DimensionMismatch {
                    expected: l.weights.nrows(),
                    got: l.bias.len(),
                });
            }
            if !l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()) {
                return Err(Error::Config("non-finite network parameter".into()));
            }
        }
        for pair in layers.windows(2) {
            if pair[1].weights.ncols() != pair[0].weights.nrows() {
                return Err(Error::DimensionMismatch {
                    expected: pair[0].weights.nrows(),
                    got: pair[1].weights.ncols(),
                });
            }
        }
        Ok(Self { layers, seed })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").weights.nrows()
    }

    /// Layer widths, input first.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.weights.nrows()));
        s
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.output.as_slice().to_vec())
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<ForwardCache> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = DVector::from_column_slice(x);
        for l in &self.layers {
            let z = &l.weights * &a + &l.bias;
            let next = l.activation.apply(&z);
            inputs.push(a);
            pre.push(z);
            a = next;
        }
        Ok(ForwardCache {
            inputs,
            pre,
            output: a,
        })
    }

    /// Accumulates parameter gradients for `d loss / d output`.
    pub fn backward(&self, cache: &ForwardCache, d_output: &[f64], grads: &mut MlpGrads) {
        let last = self.layers.len() - 1;
        let da = DVector::from_column_slice(d_output);
        let dz = self.layers[last]
            .activation
            .backward(&cache.pre[last], &cache.output, &da);
        self.backward_pre(cache, dz, grads);
    }

    /// Same as [`Mlp::backward`] but starting from the gradient with respect
    /// to the last pre-activation (e.g. softmax logits).
    pub fn backward_from_pre_activation(
        &self,
        cache: &ForwardCache,
        d_pre: &[f64],
        grads: &mut MlpGrads,
    ) {
        self.backward_pre(cache, DVector::from_column_slice(d_pre), grads);
    }

    fn backward_pre(&self, cache: &ForwardCache, mut dz: DVector<f64>, grads: &mut MlpGrads) {
        for i in (0..self.layers.len()).rev() {
            let input = &cache.inputs[i];
            grads.weights[i].ger(1.0, &dz, input, 1.0);
            grads.bias[i] += &dz;
            if i == 0 {
                break;
            }
            let da = self.layers[i].weights.tr_mul(&dz);
            dz = self.layers[i - 1]
                .activation
                .backward(&cache.pre[i - 1], input, &da);
        }
    }

    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        let header = MlpHeader {
            format: MLP_FORMAT.into(),
            version: MLP_VERSION,
            sizes: self.sizes(),
            activations: self.layers.iter().map(|l| l.activation).collect(),
            seed: self.seed,
        };
        writeln!(w, "{}", serde_json::to_string(&header)?)?;
        for l in &self.layers {
            let mut row_major = Vec::with_capacity(l.weights.len());
            for r in 0..l.weights.nrows() {
                for c in 0..l.weights.ncols() {
                    row_major.push(l.weights[(r, c)]);
                }
            }
            writeln!(w, "{}", join(&row_major))?;
            writeln!(w, "{}", join(l.bias.as_slice()))?;
        }
        Ok(())
    }

    /// Reads one network written by [`Mlp::write_text`] from a line iterator.
    pub fn read_lines<I>(lines: &mut I) -> Result<Self>
    where
        I: Iterator<Item = std::io::Result<String>>,
    {
        let mut next = |what: &str| -> Result<String> {
            lines.next().ok_or_else(|| Error::Parse {
                line: 0,
                msg: format!("unexpected end of network dump ({what})"),
            })?
            .map_err(Error::from)
        };
        let header: MlpHeader = serde_json::from_str(&next("header")?)?;
        if header.format != MLP_FORMAT || header.version != MLP_VERSION {
            return Err(Error::Parse {
                line: 0,
                msg: format!("unsupported network format {} v{}", header.format, header.version),
            });
        }
        if header.sizes.len() != header.activations.len() + 1 {
            return Err(Error::Parse {
                line: 0,
                msg: "sizes/activations length mismatch".into(),
            });
        }
        let mut layers = Vec::new();
        for (i, act) in header.activations.iter().enumerate() {
            let (n_in, n_out) = (header.sizes[i], header.sizes[i + 1]);
            let w = parse_floats(&next("weights")?)?;
            let b = parse_floats(&next("bias")?)?;
            if w.len() != n_in * n_out || b.len() != n_out {
                return Err(Error::Parse {
                    line: 0,
                    msg: format!("layer {i} has wrong parameter count"),
                });
            }
            layers.push(Layer {
                weights: DMatrix::from_row_slice(n_out, n_in, &w),
                bias: DVector::from_vec(b),
                activation: *act,
            });
        }
        Mlp::new(layers, header.seed)
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        Self::read_lines(&mut r.lines())
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(" ")
}

fn parse_floats(line: &str) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|t| {
            t.parse::<f64>().map_err(|e| Error::Parse {
                line: 0,
                msg: format!("bad number '{t}': {e}"),
            })
        })
        .collect()
}

/// Fan-in scaled uniform initialization: ReLU hidden layers use
/// `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, the head `U(-sqrt(3/fan_in), ..)`.
/// Biases start at zero.
pub fn init_pose_network(sizes: &[usize], head: Activation, seed: u64) -> Result<Mlp> {
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = sizes.len() - 1;
    let layers = (0..n)
        .map(|i| {
            let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
            let last = i + 1 == n;
            let gain = if last { 3.0 } else { 6.0 };
            let bound = (gain / fan_in as f64).sqrt();
            let weights = DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-bound..bound));
            Layer {
                weights,
                bias: DVector::zeros(fan_out),
                activation: if last { head } else { Activation::Relu },
            }
        })
        .collect();
    Mlp::new(layers, seed)
}

/// Rule mapping a key pose and a delta to the final pose.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombinationRule {
    /// `z + dy`
    Additive,
    /// `(z + dy) / ||z + dy||`
    QuaternionRenorm,
    /// `exp(z) exp(dy)`
    Riemannian,
}

impl CombinationRule {
    pub fn check(self, representation: Representation) -> Result<()> {
        let ok = match self {
            CombinationRule::Additive => true,
            CombinationRule::QuaternionRenorm => representation == Representation::Quaternion,
            CombinationRule::Riemannian => representation == Representation::AxisAngle,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::FamilyMismatch(format!(
                "combination rule {self:?} is not defined for {representation}"
            )))
        }
    }

    /// Natural rule of the representation for key-plus-delta models.
    pub fn additive_for(representation: Representation) -> Self {
        match representation {
            Representation::AxisAngle => CombinationRule::Additive,
            Representation::Quaternion => CombinationRule::QuaternionRenorm,
        }
    }
}

/// Result of [`compose`].
#[derive(Clone, Debug, PartialEq)]
pub enum Composed {
    Pose(Vec<f64>),
    Rotation(Rotation),
}

impl Composed {
    pub fn to_rotation(&self, representation: Representation) -> Result<Rotation> {
        match self {
            Composed::Rotation(r) => Ok(*r),
            Composed::Pose(v) => match representation {
                Representation::AxisAngle => Ok(AxisAngle::from_unconstrained(
                    Vector3::from_column_slice(v),
                )
                .to_rotation()),
                Representation::Quaternion => representation.to_rotation(v),
            },
        }
    }
}

/// Combines key pose `key` with `delta`.
pub fn compose(rule: CombinationRule, key: &[f64], delta: &[f64]) -> Result<Composed> {
    if key.len() != delta.len() {
        return Err(Error::DimensionMismatch {
            expected: key.len(),
            got: delta.len(),
        });
    }
    match rule {
        CombinationRule::Additive => {
            let sum: Vec<f64> = key.iter().zip(delta).map(|(a, b)| a + b).collect();
            if sum.len() == 3 {
                let y = AxisAngle::from_unconstrained(Vector3::from_column_slice(&sum));
                Ok(Composed::Pose(y.vector().as_slice().to_vec()))
            } else {
                Ok(Composed::Pose(sum))
            }
        }
        CombinationRule::QuaternionRenorm => {
            Representation::Quaternion.check(key)?;
            let s = Vector4::from_column_slice(key) + Vector4::from_column_slice(delta);
            let n = s.norm();
            if n < 1e-12 {
                return Err(Error::ZeroSum);
            }
            Ok(Composed::Pose((s / n).as_slice().to_vec()))
        }
        CombinationRule::Riemannian => {
            Representation::AxisAngle.check(key)?;
            let key_rot = exp_so3(&Vector3::from_column_slice(key));
            let m = key_rot * exp_so3(&Vector3::from_column_slice(delta));
            Ok(Composed::Rotation(Rotation::from_matrix_unchecked(m)))
        }
    }
}

/// Bin network probabilities plus one shared delta or one delta per bin.
#[derive(Clone, Debug, PartialEq)]
pub struct BinDeltaPrediction {
    pub probs: Vec<f64>,
    pub deltas: Vec<Vec<f64>>,
}

impl BinDeltaPrediction {
    pub fn new(probs: Vec<f64>, deltas: Vec<Vec<f64>>) -> Result<Self> {
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-9 || probs.iter().any(|p| *p < 0.0) {
            return Err(Error::Config(format!("probabilities sum to {s}")));
        }
        if deltas.len() != 1 && deltas.len() != probs.len() {
            return Err(Error::DimensionMismatch {
                expected: probs.len(),
                got: deltas.len(),
            });
        }
        Ok(Self { probs, deltas })
    }

    pub fn label(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn delta_for(&self, label: usize) -> &[f64] {
        if self.deltas.len() == 1 {
            &self.deltas[0]
        } else {
            &self.deltas[label]
        }
    }
}

/// Final rotation: key of the most probable bin combined with its delta.
pub fn predict(
    bd: &BinDeltaPrediction,
    dict: &PoseDictionary,
    rule: CombinationRule,
) -> Result<Rotation> {
    if bd.probs.len() != dict.len() {
        return Err(Error::DimensionMismatch {
            expected: dict.len(),
            got: bd.probs.len(),
        });
    }
    rule.check(dict.representation())?;
    let l = bd.label();
    compose(rule, dict.key(l), bd.delta_for(l))?.to_rotation(dict.representation())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::so3::geodesic_distance;
    use std::f64::consts::FRAC_PI_4;

    fn single_layer(w: DMatrix<f64>, act: Activation) -> Mlp {
        let n = w.nrows();
        Mlp::new(
            vec![Layer {
                weights: w,
                bias: DVector::zeros(n),
                activation: act,
            }],
            0,
        )
        .unwrap()
    }

    #[test]
    fn zero_network_with_pi_tanh_outputs_zero() {
        let net = single_layer(DMatrix::zeros(3, 5), Activation::PiTanh);
        assert_eq!(net.forward(&[1.0, -2.0, 3.0, 0.5, 9.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn l2_head_is_unit_norm() {
        let net = single_layer(DMatrix::from_fn(4, 3, |r, c| (r as f64) - 0.7 * c as f64), Activation::L2Normalize);
        let out = net.forward(&[0.3, -1.2, 2.0]).unwrap();
        let n: f64 = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identity_linear_layer() {
        let net = single_layer(DMatrix::identity(3, 3), Activation::Linear);
        assert_eq!(net.forward(&[1.5, -2.0, 0.25]).unwrap(), vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn forward_checks_dimension() {
        let net = single_layer(DMatrix::identity(3, 3), Activation::Linear);
        assert!(matches!(
            net.forward(&[1.0, 2.0]),
            Err(Error::DimensionMismatch { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn init_is_seeded_and_shaped() {
        let a = init_pose_network(&[8, 4, 3], Activation::PiTanh, 11).unwrap();
        let b = init_pose_network(&[8, 4, 3], Activation::PiTanh, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.layers()[0].weights.shape(), (4, 8));
        assert_eq!(a.layers()[1].weights.shape(), (3, 4));
        let out = a.forward(&[0.5; 8]).unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
        let c = init_pose_network(&[8, 4, 3], Activation::PiTanh, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn text_dump_roundtrips_bit_exactly() {
        let net = init_pose_network(&[6, 5, 4], Activation::L2Normalize, 3).unwrap();
        let mut buf = Vec::new();
        net.write_text(&mut buf).unwrap();
        let back = Mlp::read_text(buf.as_slice()).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn compose_examples() {
        let key = [0.1, -0.2, 0.3];
        assert_eq!(
            compose(CombinationRule::Additive, &key, &[0.0; 3]).unwrap(),
            Composed::Pose(key.to_vec())
        );
        let d = [0.2, 0.4, -0.1];
        let r = compose(CombinationRule::Riemannian, &[0.0; 3], &d).unwrap();
        assert_eq!(r, Composed::Rotation(Rotation::from_matrix_unchecked(exp_so3(&Vector3::from(d)))));
        let r = compose(CombinationRule::Riemannian, &[0.0, 0.0, FRAC_PI_4], &[0.0, 0.0, FRAC_PI_4])
            .unwrap()
            .to_rotation(Representation::AxisAngle)
            .unwrap();
        let target = Rotation::about_z(FRAC_PI_4) * Rotation::about_z(FRAC_PI_4);
        assert!(geodesic_distance(&r, &target) < 1e-12);
        assert!((r.matrix() - Rotation::about_z(std::f64::consts::FRAC_PI_2).matrix()).norm() < 1e-12);
    }

    #[test]
    fn renorm_rejects_cancelling_sum() {
        let r = compose(CombinationRule::QuaternionRenorm, &[1.0, 0.0, 0.0, 0.0], &[-1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(r, Err(Error::ZeroSum)));
    }

    #[test]
    fn additive_overflow_is_wrapped_below_pi() {
        let c = compose(CombinationRule::Additive, &[3.0, 0.0, 0.0], &[0.5, 0.5, 0.0]).unwrap();
        match c {
            Composed::Pose(v) => assert!(Representation::AxisAngle.is_valid(&v)),
            _ => panic!("additive rule yields a pose"),
        }
    }

    #[test]
    fn rule_representation_compatibility() {
        assert!(CombinationRule::Riemannian.check(Representation::Quaternion).is_err());
        assert!(CombinationRule::QuaternionRenorm.check(Representation::AxisAngle).is_err());
        assert!(CombinationRule::Additive.check(Representation::Quaternion).is_ok());
    }

    fn dict3() -> PoseDictionary {
        PoseDictionary::new(
            Representation::AxisAngle,
            vec![vec![0.0, 0.0, 0.0], vec![0.5, 0.0, 0.0], vec![0.0, 0.5, 0.0]],
        )
        .unwrap()
    }

    #[test]
    fn predict_uses_argmax_key() {
        let d = dict3();
        let bd = BinDeltaPrediction::new(vec![0.0, 0.0, 1.0], vec![vec![0.0; 3]]).unwrap();
        let r = predict(&bd, &d, CombinationRule::Additive).unwrap();
        assert!(geodesic_distance(&r, d.key_rotation(2)) < 1e-15);
        let third = 1.0 / 3.0;
        let bd = BinDeltaPrediction::new(vec![third; 3], vec![vec![0.0; 3]; 3]).unwrap();
        let r = predict(&bd, &d, CombinationRule::Riemannian).unwrap();
        assert!(geodesic_distance(&r, d.key_rotation(0)) < 1e-15);
    }

    #[test]
    fn predict_checks_probability_length() {
        let bd = BinDeltaPrediction::new(vec![0.5, 0.5], vec![vec![0.0; 3]]).unwrap();
        assert!(predict(&bd, &dict3(), CombinationRule::Additive).is_err());
    }
}
