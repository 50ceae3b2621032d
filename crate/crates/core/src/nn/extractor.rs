use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{matmul, matmul_nt, matmul_tn, Matrix, RngStream};
use crate::repsim::LayerTapSet;

/// Shape of a staged MLP feature extractor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSpec {
    pub input_dim: usize,
    pub stages: usize,
    pub width: usize,
    pub layers_per_stage: usize,
    pub feature_dim: usize,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            input_dim: 32,
            stages: 4,
            width: 64,
            layers_per_stage: 1,
            feature_dim: 32,
        }
    }
}

/// Affine map `x ↦ W·x + b`, optionally followed by ReLU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub id: String,
    /// `d_out × d_in`
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub relu: bool,
}

impl Layer {
    pub fn new(id: String, d_in: usize, d_out: usize, relu: bool, rng: &mut RngStream) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = Matrix::from_fn(d_out, d_in, |_, _| rng.uniform(-bound, bound));
        let bias = (0..d_out).map(|_| rng.uniform(-bound, bound)).collect();
        Layer {
            id,
            weight,
            bias,
            relu,
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.rows()
    }

    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = matmul_nt(x, &self.weight)?;
        for i in 0..y.rows() {
            for (v, b) in y.row_mut(i).iter_mut().zip(&self.bias) {
                *v += b;
                if self.relu && *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        Ok(y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub layers: Vec<Layer>,
}

/// Stack of ReLU MLP stages. The last layer of a full extractor emits the
/// feature vector without a ReLU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractor {
    stages: Vec<Stage>,
    frozen: bool,
    param_version: u64,
}

/// Per-layer gradients of an extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Forward activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ExtractorCache {
    /// Input to each layer, followed by the extractor output.
    pub(crate) activations: Vec<Matrix>,
}

impl ExtractorCache {
    pub fn output(&self) -> &Matrix {
        self.activations.last().expect("cache holds the input at least")
    }
}

impl FeatureExtractor {
    /// Fresh extractor with `uniform(±1/√d_in)` initialization.
    pub fn new(arch: &ArchSpec, rng: &mut RngStream) -> Result<Self> {
        if arch.stages == 0 || arch.layers_per_stage == 0 {
            return Err(Error::Config("extractor needs at least one stage and layer".into()));
        }
        let mut stages = Vec::with_capacity(arch.stages);
        let mut d_in = arch.input_dim;
        let total = arch.stages * arch.layers_per_stage;
        let mut index = 0;
        for s in 0..arch.stages {
            let mut layers = Vec::with_capacity(arch.layers_per_stage);
            for l in 0..arch.layers_per_stage {
                index += 1;
                let last = index == total;
                let d_out = if last { arch.feature_dim } else { arch.width };
                layers.push(Layer::new(
                    format!("stage{}.fc{}", s + 1, l),
                    d_in,
                    d_out,
                    !last,
                    rng,
                ));
                d_in = d_out;
            }
            stages.push(Stage {
                name: format!("stage{}", s + 1),
                layers,
            });
        }
        Ok(FeatureExtractor {
            stages,
            frozen: false,
            param_version: 0,
        })
    }

    pub fn from_stages(stages: Vec<Stage>) -> Result<Self> {
        let ext = FeatureExtractor {
            stages,
            frozen: false,
            param_version: 0,
        };
        ext.validate()?;
        Ok(ext)
    }

    fn validate(&self) -> Result<()> {
        let mut prev: Option<usize> = None;
        for layer in self.layers() {
            if layer.bias.len() != layer.d_out() {
                return Err(Error::Dimension(format!("layer {}: bias length", layer.id)));
            }
            if let Some(p) = prev {
                if p != layer.d_in() {
                    return Err(Error::Dimension(format!(
                        "layer {} expects {} inputs, previous layer emits {p}",
                        layer.id,
                        layer.d_in()
                    )));
                }
            }
            prev = Some(layer.d_out());
        }
        if prev.is_none() {
            return Err(Error::Dimension("extractor without layers".into()));
        }
        Ok(())
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.stages.iter().flat_map(|s| s.layers.iter())
    }

    pub(crate) fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.stages.iter_mut().flat_map(|s| s.layers.iter_mut())
    }

    pub fn num_layers(&self) -> usize {
        self.stages.iter().map(|s| s.layers.len()).sum()
    }

    pub fn input_dim(&self) -> usize {
        self.layers().next().map_or(0, Layer::d_in)
    }

    pub fn output_dim(&self) -> usize {
        self.layers().last().map_or(0, Layer::d_out)
    }

    pub fn tap_ids(&self) -> Vec<String> {
        self.layers().map(|l| l.id.clone()).collect()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn param_version(&self) -> u64 {
        self.param_version
    }

    pub(crate) fn bump_version(&mut self) {
        self.param_version += 1;
    }

    pub(crate) fn set_param_version(&mut self, v: u64) {
        self.param_version = v;
    }

    pub fn num_params(&self) -> usize {
        self.layers()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    /// Multiply-accumulates for one input vector.
    pub fn macs(&self) -> u64 {
        self.layers().map(|l| (l.d_in() * l.d_out()) as u64).sum()
    }

    fn check_input(&self, batch: &Matrix) -> Result<()> {
        if batch.cols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "extractor expects {} input features, batch has {}",
                self.input_dim(),
                batch.cols()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, batch: &Matrix) -> Result<Matrix> {
        self.check_input(batch)?;
        let mut x = batch.clone();
        for layer in self.layers() {
            x = layer.forward(&x)?;
        }
        Ok(x)
    }

    /// Final features plus the output of every layer, ordered by depth.
    pub fn forward_with_taps(&self, batch: &Matrix) -> Result<(Matrix, LayerTapSet)> {
        let cache = self.forward_cached(batch)?;
        let mut acts = cache.activations;
        acts.remove(0);
        let features = acts.last().cloned().expect("at least one layer");
        let taps = LayerTapSet::new(self.tap_ids(), acts)?;
        Ok((features, taps))
    }

    pub(crate) fn forward_cached(&self, batch: &Matrix) -> Result<ExtractorCache> {
        self.check_input(batch)?;
        let mut activations = Vec::with_capacity(self.num_layers() + 1);
        activations.push(batch.clone());
        for layer in self.layers() {
            let next = layer.forward(activations.last().expect("nonempty"))?;
            activations.push(next);
        }
        Ok(ExtractorCache { activations })
    }

    /// Backpropagates `doutput` through the cached forward pass.
    ///
    /// Returns per-layer gradients (when `want_params`) and the gradient with
    /// respect to the extractor input (when `want_input`).
    pub(crate) fn backward(
        &self,
        cache: &ExtractorCache,
        doutput: Matrix,
        want_params: bool,
        want_input: bool,
    ) -> Result<(Option<Vec<LayerGrad>>, Option<Matrix>)> {
        let layers: Vec<&Layer> = self.layers().collect();
        let mut grads: Vec<LayerGrad> = Vec::with_capacity(layers.len());
        let mut delta = doutput;
        for (idx, layer) in layers.iter().enumerate().rev() {
            if layer.relu {
                let out = &cache.activations[idx + 1];
                for (d, &o) in delta.as_mut_slice().iter_mut().zip(out.as_slice()) {
                    if o <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            if want_params {
                let input = &cache.activations[idx];
                let dw = matmul_tn(&delta, input)?;
                let mut db = vec![0.0; layer.d_out()];
                for i in 0..delta.rows() {
                    for (b, d) in db.iter_mut().zip(delta.row(i)) {
                        *b += d;
                    }
                }
                grads.push(LayerGrad { weight: dw, bias: db });
            }
            if idx > 0 || want_input {
                delta = matmul(&delta, &layer.weight)?;
            } else if !want_params {
                break;
            }
        }
        grads.reverse();
        Ok((
            want_params.then_some(grads),
            want_input.then_some(delta),
        ))
    }

    /// Splits before stage `at`: `(stages[..at], stages[at..])`.
    pub fn split_at(&self, at: usize) -> Result<(FeatureExtractor, FeatureExtractor)> {
        if at == 0 || at >= self.stages.len() {
            return Err(Error::Config(format!(
                "split point {at} must lie strictly inside 1..{}",
                self.stages.len()
            )));
        }
        let lower = FeatureExtractor {
            stages: self.stages[..at].to_vec(),
            frozen: self.frozen,
            param_version: self.param_version,
        };
        let upper = FeatureExtractor {
            stages: self.stages[at..].to_vec(),
            frozen: self.frozen,
            param_version: self.param_version,
        };
        Ok((lower, upper))
    }

    /// `upper ∘ lower` as one extractor.
    pub fn compose(lower: &FeatureExtractor, upper: &FeatureExtractor) -> Result<FeatureExtractor> {
        let mut stages = lower.stages.clone();
        stages.extend(upper.stages.iter().cloned());
        let mut ext = FeatureExtractor::from_stages(stages)?;
        ext.frozen = lower.frozen && upper.frozen;
        Ok(ext)
    }

    /// Same layout with freshly drawn parameters.
    pub fn fresh_like(&self, rng: &mut RngStream) -> FeatureExtractor {
        let stages = self
            .stages
            .iter()
            .map(|s| Stage {
                name: s.name.clone(),
                layers: s
                    .layers
                    .iter()
                    .map(|l| Layer::new(l.id.clone(), l.d_in(), l.d_out(), l.relu, rng))
                    .collect(),
            })
            .collect();
        FeatureExtractor {
            stages,
            frozen: false,
            param_version: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    impl FeatureExtractor {
        fn zero_params(&mut self) {
            for layer in self.layers_mut() {
                layer.weight.as_mut_slice().fill(0.0);
                layer.bias.fill(0.0);
            }
        }
    }

    fn input(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = RngStream::new(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.normal())
    }

    #[test]
    fn default_architecture_chains() {
        let mut rng = RngStream::new(0);
        let ext = FeatureExtractor::new(&ArchSpec::default(), &mut rng).unwrap();
        assert_eq!(ext.input_dim(), 32);
        assert_eq!(ext.output_dim(), 32);
        assert_eq!(ext.tap_ids().len(), 4);
        assert!(!ext.layers().last().unwrap().relu);
        assert!(ext.layers().take(3).all(|l| l.relu));
        assert_eq!(ext.macs(), 32 * 64 + 64 * 64 * 2 + 64 * 32);
    }

    #[test]
    fn zero_network_gives_zero_outputs() {
        let mut rng = RngStream::new(1);
        let mut ext = FeatureExtractor::new(&ArchSpec::default(), &mut rng).unwrap();
        ext.zero_params();
        let (features, taps) = ext.forward_with_taps(&input(5, 32, 2)).unwrap();
        assert!(features.as_slice().iter().all(|&v| v == 0.0));
        assert!(taps
            .activations()
            .iter()
            .all(|a| a.as_slice().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn identity_layers_apply_relu_except_last() {
        let relu_layer = Layer {
            id: "a".into(),
            weight: Matrix::identity(3),
            bias: vec![0.0; 3],
            relu: true,
        };
        let out_layer = Layer {
            id: "b".into(),
            weight: Matrix::identity(3),
            bias: vec![0.0; 3],
            relu: false,
        };
        let x = input(4, 3, 3);
        let single = FeatureExtractor::from_stages(vec![Stage {
            name: "s".into(),
            layers: vec![out_layer.clone()],
        }])
        .unwrap();
        assert_eq!(single.forward(&x).unwrap(), x);

        let ext = FeatureExtractor::from_stages(vec![Stage {
            name: "s".into(),
            layers: vec![relu_layer],
        }])
        .unwrap();
        let (_, taps) = ext.forward_with_taps(&x).unwrap();
        assert_eq!(taps.activations()[0], x.map(|v| v.max(0.0)));
    }

    #[test]
    fn two_layer_forward_matches_manual() {
        let mut rng = RngStream::new(4);
        let arch = ArchSpec {
            input_dim: 3,
            stages: 2,
            width: 5,
            layers_per_stage: 1,
            feature_dim: 2,
        };
        let ext = FeatureExtractor::new(&arch, &mut rng).unwrap();
        let x = input(6, 3, 5);
        let (features, taps) = ext.forward_with_taps(&x).unwrap();
        let layers: Vec<&Layer> = ext.layers().collect();
        let affine = |l: &Layer, x: &Matrix| {
            Matrix::from_fn(x.rows(), l.d_out(), |i, o| {
                let mut s = l.bias[o];
                for k in 0..l.d_in() {
                    s += l.weight.get(o, k) * x.get(i, k);
                }
                s
            })
        };
        let h = affine(layers[0], &x).map(|v| v.max(0.0));
        let f = affine(layers[1], &h);
        assert!(taps.activations()[0].max_abs_diff(&h) < 1e-12);
        assert!(features.max_abs_diff(&f) < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mut rng = RngStream::new(0);
        let ext = FeatureExtractor::new(&ArchSpec::default(), &mut rng).unwrap();
        assert!(matches!(ext.forward(&input(2, 7, 0)), Err(Error::Dimension(_))));
    }

    #[test]
    fn split_and_compose_round_trip() {
        let mut rng = RngStream::new(6);
        let ext = FeatureExtractor::new(&ArchSpec::default(), &mut rng).unwrap();
        let (lo, hi) = ext.split_at(2).unwrap();
        assert_eq!(lo.stages().len(), 2);
        assert_eq!(lo.macs() + hi.macs(), ext.macs());
        let x = input(3, 32, 1);
        let joined = FeatureExtractor::compose(&lo, &hi).unwrap();
        assert_eq!(joined.forward(&x).unwrap(), ext.forward(&x).unwrap());
        assert!(ext.split_at(0).is_err());
        assert!(ext.split_at(4).is_err());
    }
}
