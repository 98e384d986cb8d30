//! Per-category pose networks, Adam, and checkpoints.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dictionary::{argmax, softmax, PoseDictionary};
use crate::error::{Error, Result};
use crate::losses::{Family, NetOutput, ObjectiveSpec};
use crate::models::{init_pose_network, predict, Activation, BinDeltaPrediction, ForwardCache, Mlp, MlpGrads};
use crate::pose::Representation;
use crate::so3::Rotation;

/// Networks of one category.
#[derive(Clone, Debug, PartialEq)]
pub enum Networks {
    /// Direct pose regression.
    Regression(Mlp),
    /// Bin network only.
    Classifier(Mlp),
    /// Bin network plus one shared or K per-bin Delta networks.
    BinDelta { bin: Mlp, deltas: Vec<Mlp> },
}

impl Networks {
    pub fn all(&self) -> Vec<&Mlp> {
        match self {
            Networks::Regression(n) | Networks::Classifier(n) => vec![n],
            Networks::BinDelta { bin, deltas } => std::iter::once(bin).chain(deltas.iter()).collect(),
        }
    }

    pub fn all_mut(&mut self) -> Vec<&mut Mlp> {
        match self {
            Networks::Regression(n) | Networks::Classifier(n) => vec![n],
            Networks::BinDelta { bin, deltas } => std::iter::once(bin).chain(deltas.iter_mut()).collect(),
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Networks::Regression(_) => "regression",
            Networks::Classifier(_) => "classifier",
            Networks::BinDelta { .. } => "bin_delta",
        }
    }
}

/// Output head of a direct regression network.
pub fn pose_head(representation: Representation) -> Activation {
    match representation {
        Representation::AxisAngle => Activation::PiTanh,
        Representation::Quaternion => Activation::L2Normalize,
    }
}

/// Output head of a Delta network: bounded for axis-angle, linear for
/// quaternion residuals.
pub fn delta_head(representation: Representation) -> Activation {
    match representation {
        Representation::AxisAngle => Activation::PiTanh,
        Representation::Quaternion => Activation::Linear,
    }
}

/// Pose model of one category.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoryModel {
    pub category: String,
    pub spec: ObjectiveSpec,
    pub dictionary: Option<PoseDictionary>,
    pub networks: Networks,
}

/// Architecture parameters shared by every category.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub feature_dim: usize,
    pub hidden: Vec<usize>,
    pub per_bin_hidden: usize,
}

fn sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut s = vec![input];
    s.extend_from_slice(hidden);
    s.push(output);
    s
}

impl CategoryModel {
    /// Freshly initialized networks. `seeds` yields one seed per network.
    pub fn init(
        category: &str,
        spec: ObjectiveSpec,
        dictionary: Option<PoseDictionary>,
        arch: &Architecture,
        mut seeds: impl FnMut(usize) -> u64,
    ) -> Result<Self> {
        let repr = spec.representation;
        let dim = repr.dim();
        let f = arch.feature_dim;
        let networks = if spec.family.is_regression() {
            Networks::Regression(init_pose_network(&sizes(f, &arch.hidden, dim), pose_head(repr), seeds(0))?)
        } else {
            let dict = dictionary
                .as_ref()
                .ok_or_else(|| Error::Config(format!("{} needs a pose dictionary", spec.family)))?;
            let bin = init_pose_network(&sizes(f, &arch.hidden, dict.len()), Activation::Linear, seeds(0))?;
            if spec.family == Family::C {
                Networks::Classifier(bin)
            } else if spec.family.per_bin() {
                let deltas = (0..dict.len())
                    .map(|k| init_pose_network(&[f, arch.per_bin_hidden, dim], delta_head(repr), seeds(k + 1)))
                    .collect::<Result<_>>()?;
                Networks::BinDelta { bin, deltas }
            } else {
                let delta = init_pose_network(&sizes(f, &arch.hidden, dim), delta_head(repr), seeds(1))?;
                Networks::BinDelta {
                    bin,
                    deltas: vec![delta],
                }
            }
        };
        Ok(Self {
            category: category.to_string(),
            spec,
            dictionary,
            networks,
        })
    }

    /// Raw outputs for one feature vector.
    pub fn output(&self, f: &[f64]) -> Result<NetOutput> {
        Ok(match &self.networks {
            Networks::Regression(n) => NetOutput::Pose(n.forward(f)?),
            Networks::Classifier(n) => NetOutput::Logits(n.forward(f)?),
            Networks::BinDelta { bin, deltas } => NetOutput::BinDelta {
                logits: bin.forward(f)?,
                deltas: deltas.iter().map(|d| d.forward(f)).collect::<Result<_>>()?,
            },
        })
    }

    /// Outputs together with the caches needed by [`CategoryModel::backward`].
    pub fn output_cached(&self, f: &[f64]) -> Result<(NetOutput, Vec<ForwardCache>)> {
        let nets = self.networks.all();
        let caches = nets.iter().map(|n| n.forward_cached(f)).collect::<Result<Vec<_>>>()?;
        let out = match &self.networks {
            Networks::Regression(_) => NetOutput::Pose(caches[0].output().to_vec()),
            Networks::Classifier(_) => NetOutput::Logits(caches[0].output().to_vec()),
            Networks::BinDelta { .. } => NetOutput::BinDelta {
                logits: caches[0].output().to_vec(),
                deltas: caches[1..].iter().map(|c| c.output().to_vec()).collect(),
            },
        };
        Ok((out, caches))
    }

    /// Accumulates parameter gradients. `touched[i]` is set for every network
    /// that received a nonzero output gradient.
    pub fn backward(
        &self,
        caches: &[ForwardCache],
        d_pose: &[f64],
        d_logits: &[f64],
        d_deltas: &[Vec<f64>],
        grads: &mut [MlpGrads],
        touched: &mut [bool],
    ) {
        let nets = self.networks.all();
        let mut run = |i: usize, g: &[f64]| {
            if g.iter().any(|x| *x != 0.0) {
                nets[i].backward(&caches[i], g, &mut grads[i]);
                touched[i] = true;
            }
        };
        match &self.networks {
            Networks::Regression(_) => run(0, d_pose),
            Networks::Classifier(_) => run(0, d_logits),
            Networks::BinDelta { .. } => {
                run(0, d_logits);
                for (k, g) in d_deltas.iter().enumerate() {
                    run(k + 1, g);
                }
            }
        }
    }

    /// Predicted rotation for one feature vector.
    pub fn predict(&self, f: &[f64]) -> Result<Rotation> {
        let repr = self.spec.representation;
        match &self.networks {
            Networks::Regression(n) => repr.to_rotation(&n.forward(f)?),
            Networks::Classifier(n) => {
                let dict = self.dictionary.as_ref().expect("classifier has a dictionary");
                Ok(*dict.key_rotation(argmax(&n.forward(f)?)))
            }
            Networks::BinDelta { bin, deltas } => {
                let dict = self.dictionary.as_ref().expect("bin & delta has a dictionary");
                let logits = bin.forward(f)?;
                let d = if deltas.len() == 1 {
                    vec![deltas[0].forward(f)?]
                } else {
                    // only the selected head matters; the rest are left at zero
                    let l = argmax(&logits);
                    let mut d = vec![vec![0.0; repr.dim()]; deltas.len()];
                    d[l] = deltas[l].forward(f)?;
                    d
                };
                let bd = BinDeltaPrediction::new(softmax(&logits), d)?;
                predict(&bd, dict, self.spec.rule)
            }
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.networks.all().iter().map(|n| n.parameter_count()).sum()
    }
}

/// Adam moments of one network.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: MlpGrads,
    v: MlpGrads,
    t: i32,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(net: &Mlp) -> Self {
        Self {
            m: MlpGrads::zeros_like(net),
            v: MlpGrads::zeros_like(net),
            t: 0,
        }
    }

    /// One bias-corrected Adam update with gradient `g`.
    pub fn step(&mut self, net: &mut Mlp, g: &MlpGrads, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (i, layer) in net.layers_mut().iter_mut().enumerate() {
            update(&mut layer.weights, &mut self.m.weights[i], &mut self.v.weights[i], &g.weights[i], lr, c1, c2);
            let mut b = DMatrix::from_column_slice(layer.bias.len(), 1, layer.bias.as_slice());
            let mut mb = DMatrix::from_column_slice(layer.bias.len(), 1, self.m.bias[i].as_slice());
            let mut vb = DMatrix::from_column_slice(layer.bias.len(), 1, self.v.bias[i].as_slice());
            let gb = DMatrix::from_column_slice(layer.bias.len(), 1, g.bias[i].as_slice());
            update(&mut b, &mut mb, &mut vb, &gb, lr, c1, c2);
            layer.bias = DVector::from_column_slice(b.as_slice());
            self.m.bias[i] = DVector::from_column_slice(mb.as_slice());
            self.v.bias[i] = DVector::from_column_slice(vb.as_slice());
        }
    }
}

fn update(
    p: &mut DMatrix<f64>,
    m: &mut DMatrix<f64>,
    v: &mut DMatrix<f64>,
    g: &DMatrix<f64>,
    lr: f64,
    c1: f64,
    c2: f64,
) {
    for (((p, m), v), g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.iter()) {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
    }
}

const CHECKPOINT_FORMAT: &str = "orient-geo-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    objective: ObjectiveSpec,
    categories: usize,
}

#[derive(Serialize, Deserialize)]
struct CategoryHeader {
    category: String,
    kind: String,
    networks: usize,
    dictionary: bool,
}

/// Writes all category models: a JSON header line, then per category a JSON
/// line, the dictionary text (if any) and every network dump.
pub fn write_checkpoint<W: Write>(models: &[CategoryModel], mut w: W) -> Result<()> {
    let spec = models
        .first()
        .map(|m| m.spec)
        .ok_or_else(|| Error::Config("no models to checkpoint".into()))?;
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        objective: spec,
        categories: models.len(),
    };
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    for m in models {
        let nets = m.networks.all();
        let h = CategoryHeader {
            category: m.category.clone(),
            kind: m.networks.kind().into(),
            networks: nets.len(),
            dictionary: m.dictionary.is_some(),
        };
        writeln!(w, "{}", serde_json::to_string(&h)?)?;
        if let Some(d) = &m.dictionary {
            d.write_text(&mut w)?;
        }
        for n in nets {
            n.write_text(&mut w)?;
        }
    }
    Ok(())
}

/// Inverse of [`write_checkpoint`]; parameters roundtrip bit-exactly.
pub fn read_checkpoint<R: BufRead>(r: R) -> Result<Vec<CategoryModel>> {
    let mut lines = r.lines();
    let next = |lines: &mut std::io::Lines<R>| -> Result<String> {
        lines
            .next()
            .ok_or_else(|| Error::Parse {
                line: 0,
                msg: "unexpected end of checkpoint".into(),
            })?
            .map_err(Error::from)
    };
    let header: CheckpointHeader = serde_json::from_str(&next(&mut lines)?)?;
    if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
        return Err(Error::Parse {
            line: 1,
            msg: "not an orient-geo checkpoint".into(),
        });
    }
    let mut out = Vec::with_capacity(header.categories);
    for _ in 0..header.categories {
        let h: CategoryHeader = serde_json::from_str(&next(&mut lines)?)?;
        let dictionary = if h.dictionary {
            let first = next(&mut lines)?;
            let k: usize = first
                .split_whitespace()
                .find_map(|f| f.strip_prefix("K=").and_then(|v| v.parse().ok()))
                .ok_or_else(|| Error::Parse {
                    line: 0,
                    msg: "dictionary header lacks K".into(),
                })?;
            let mut text = first;
            text.push('\n');
            for _ in 0..k {
                text.push_str(&next(&mut lines)?);
                text.push('\n');
            }
            Some(PoseDictionary::read_text(text.as_bytes())?)
        } else {
            None
        };
        let mut nets = (0..h.networks)
            .map(|_| Mlp::read_lines(&mut lines))
            .collect::<Result<Vec<_>>>()?;
        let networks = match h.kind.as_str() {
            "regression" if nets.len() == 1 => Networks::Regression(nets.remove(0)),
            "classifier" if nets.len() == 1 => Networks::Classifier(nets.remove(0)),
            "bin_delta" if nets.len() >= 2 => {
                let bin = nets.remove(0);
                Networks::BinDelta { bin, deltas: nets }
            }
            k => {
                return Err(Error::Parse {
                    line: 0,
                    msg: format!("bad network kind '{k}' with {} networks", nets.len()),
                })
            }
        };
        out.push(CategoryModel {
            category: h.category,
            spec: header.objective,
            dictionary,
            networks,
        });
    }
    Ok(out)
}
