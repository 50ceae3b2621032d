use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::extractor::{FeatureExtractor, LayerGrad};
use super::head::{sgd_update, Head, HeadGrad};
use super::loss::{cross_entropy_masked, distill_loss};
use crate::error::{Error, Result};
use crate::numeric::Matrix;
use crate::repsim::LayerTapSet;

/// Classifier over concatenated branch features: `G ∘ [F_0 ‖ … ‖ F_k] ∘ stem`.
///
/// A plain model has no stem and one branch. DER appends whole branches;
/// partial DER shares a frozen stem and appends upper-layer branches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    stem: Option<FeatureExtractor>,
    branches: Vec<FeatureExtractor>,
    head: Head,
    head_frozen: bool,
}

/// Gradients for every trainable parameter tensor of a [`Network`].
/// Frozen components carry `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub stem: Option<Vec<LayerGrad>>,
    pub branches: Vec<Option<Vec<LayerGrad>>>,
    pub head: Option<HeadGrad>,
}

impl GradientSet {
    /// Number of gradient buffers present.
    pub fn num_buffers(&self) -> usize {
        let ext = |g: &Option<Vec<LayerGrad>>| g.as_ref().map_or(0, |v| v.len() * 2);
        let head = self.head.as_ref().map_or(0, |h| {
            1 + usize::from(h.bias.is_some()) + usize::from(h.scale.is_some())
        });
        ext(&self.stem) + self.branches.iter().map(ext).sum::<usize>() + head
    }

    pub fn has_extractor_grads(&self) -> bool {
        self.stem.is_some() || self.branches.iter().any(Option::is_some)
    }

    /// Euclidean norm over every buffer.
    pub fn global_norm(&self) -> f64 {
        self.named()
            .iter()
            .flat_map(|(_, g)| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Multiplies every buffer by `c`.
    pub fn scale_by(&mut self, c: f64) {
        for g in self.stem.iter_mut().chain(self.branches.iter_mut().flatten()) {
            for lg in g {
                lg.weight.as_mut_slice().iter_mut().for_each(|v| *v *= c);
                lg.bias.iter_mut().for_each(|v| *v *= c);
            }
        }
        if let Some(h) = &mut self.head {
            h.weight.as_mut_slice().iter_mut().for_each(|v| *v *= c);
            h.bias.iter_mut().flatten().for_each(|v| *v *= c);
            if let Some(s) = &mut h.scale {
                *s *= c;
            }
        }
    }

    /// Buffers keyed like [`Network::named_params`].
    pub fn named(&self) -> Vec<(String, &[f64])> {
        fn push_ext<'a>(
            out: &mut Vec<(String, &'a [f64])>,
            prefix: &str,
            grads: &'a Option<Vec<LayerGrad>>,
        ) {
            for (i, g) in grads.iter().flatten().enumerate() {
                out.push((format!("{prefix}.layer{i}.weight"), g.weight.as_slice()));
                out.push((format!("{prefix}.layer{i}.bias"), g.bias.as_slice()));
            }
        }
        let mut out = Vec::new();
        push_ext(&mut out, "stem", &self.stem);
        for (k, b) in self.branches.iter().enumerate() {
            push_ext(&mut out, &format!("branch{k}"), b);
        }
        if let Some(h) = &self.head {
            out.push(("head.weight".into(), h.weight.as_slice()));
            if let Some(b) = &h.bias {
                out.push(("head.bias".into(), b.as_slice()));
            }
            if let Some(s) = &h.scale {
                out.push(("head.scale".into(), std::slice::from_ref(s)));
            }
        }
        out
    }
}

/// Distillation term: the first `teacher.cols()` student logits are matched
/// to the teacher at temperature `temperature`, scaled by `weight`.
#[derive(Debug, Clone, Copy)]
pub struct DistillTerm<'a> {
    pub teacher_logits: &'a Matrix,
    pub temperature: f64,
    pub weight: f64,
}

/// Loss to differentiate: masked cross-entropy plus optional distillation.
#[derive(Debug, Clone, Copy)]
pub struct LossSpec<'a> {
    pub labels: &'a [usize],
    pub active: &'a [usize],
    pub distill: Option<DistillTerm<'a>>,
}

impl LossSpec<'_> {
    /// Loss value and gradient with respect to the logits.
    pub fn evaluate(&self, logits: &Matrix) -> Result<(f64, Matrix)> {
        let (mut loss, mut dlogits) = cross_entropy_masked(logits, self.labels, self.active)?;
        if let Some(d) = self.distill {
            if d.weight != 0.0 {
                let old = d.teacher_logits.cols();
                if old > logits.cols() {
                    return Err(Error::Dimension(format!(
                        "teacher has {old} logits, student only {}",
                        logits.cols()
                    )));
                }
                let student = logits.column_range(0, old);
                let (dl, dg) = distill_loss(&student, d.teacher_logits, d.temperature)?;
                loss += d.weight * dl;
                for i in 0..dlogits.rows() {
                    for (g, extra) in dlogits.row_mut(i)[..old].iter_mut().zip(dg.row(i)) {
                        *g += d.weight * extra;
                    }
                }
            }
        }
        Ok((loss, dlogits))
    }
}

struct ForwardCache {
    stem: Option<super::extractor::ExtractorCache>,
    branches: Vec<super::extractor::ExtractorCache>,
    features: Matrix,
    head: super::head::HeadCache,
    logits: Matrix,
}

impl Network {
    pub fn new(extractor: FeatureExtractor, head: Head) -> Result<Self> {
        Network::with_parts(None, vec![extractor], head)
    }

    pub fn with_parts(
        stem: Option<FeatureExtractor>,
        branches: Vec<FeatureExtractor>,
        head: Head,
    ) -> Result<Self> {
        let net = Network {
            stem,
            branches,
            head,
            head_frozen: false,
        };
        net.validate()?;
        Ok(net)
    }

    fn validate(&self) -> Result<()> {
        if self.branches.is_empty() {
            return Err(Error::Dimension("network without branches".into()));
        }
        if let Some(stem) = &self.stem {
            if self.branches.iter().any(|b| b.input_dim() != stem.output_dim()) {
                return Err(Error::Dimension("branch input does not match stem output".into()));
            }
        } else if self
            .branches
            .iter()
            .any(|b| b.input_dim() != self.branches[0].input_dim())
        {
            return Err(Error::Dimension("branches disagree on input width".into()));
        }
        if self.feature_dim() != self.head.feature_dim() {
            return Err(Error::Dimension(format!(
                "head expects {} features, branches emit {}",
                self.head.feature_dim(),
                self.feature_dim()
            )));
        }
        Ok(())
    }

    pub fn stem(&self) -> Option<&FeatureExtractor> {
        self.stem.as_ref()
    }

    pub fn branches(&self) -> &[FeatureExtractor] {
        &self.branches
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut Head {
        &mut self.head
    }

    pub fn set_head(&mut self, head: Head) -> Result<()> {
        if head.feature_dim() != self.feature_dim() {
            return Err(Error::Dimension("replacement head width".into()));
        }
        self.head = head;
        Ok(())
    }

    pub fn head_frozen(&self) -> bool {
        self.head_frozen
    }

    pub fn set_head_frozen(&mut self, frozen: bool) {
        self.head_frozen = frozen;
    }

    pub fn input_dim(&self) -> usize {
        self.stem
            .as_ref()
            .map_or_else(|| self.branches[0].input_dim(), FeatureExtractor::input_dim)
    }

    /// Width of the concatenated branch features.
    pub fn feature_dim(&self) -> usize {
        self.branches.iter().map(FeatureExtractor::output_dim).sum()
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    /// Freezes (or unfreezes) every extractor component.
    pub fn freeze_extractors(&mut self, frozen: bool) {
        if let Some(s) = &mut self.stem {
            s.set_frozen(frozen);
        }
        for b in &mut self.branches {
            b.set_frozen(frozen);
        }
    }

    pub fn extractors_frozen(&self) -> bool {
        self.stem.as_ref().is_none_or(FeatureExtractor::is_frozen)
            && self.branches.iter().all(FeatureExtractor::is_frozen)
    }

    /// Adds a branch; the head grows `extra` zero-weight inputs.
    pub fn push_branch(&mut self, branch: FeatureExtractor) -> Result<()> {
        let expected = match &self.stem {
            Some(s) => s.output_dim(),
            None => self.branches[0].input_dim(),
        };
        if branch.input_dim() != expected {
            return Err(Error::Dimension("new branch input width".into()));
        }
        self.head.add_inputs(branch.output_dim());
        self.branches.push(branch);
        Ok(())
    }

    /// Splits a single-branch network into a shared stem (stages below `at`)
    /// and an upper branch.
    pub fn split_stem(&mut self, at: usize) -> Result<()> {
        if self.stem.is_some() || self.branches.len() != 1 {
            return Err(Error::Protocol("stem split needs a plain single-branch network".into()));
        }
        let (lower, upper) = self.branches[0].split_at(at)?;
        self.stem = Some(lower);
        self.branches = vec![upper];
        Ok(())
    }

    /// Standalone extractor computing branch `k` (with the stem, if any).
    pub fn branch_extractor(&self, k: usize) -> Result<FeatureExtractor> {
        let branch = self
            .branches
            .get(k)
            .ok_or_else(|| Error::Parameter(format!("no branch {k}")))?;
        match &self.stem {
            Some(stem) => FeatureExtractor::compose(stem, branch),
            None => Ok(branch.clone()),
        }
    }

    fn stem_output(&self, batch: &Matrix) -> Result<Matrix> {
        match &self.stem {
            Some(s) => s.forward(batch),
            None => Ok(batch.clone()),
        }
    }

    pub fn features(&self, batch: &Matrix) -> Result<Matrix> {
        let base = self.stem_output(batch)?;
        let outs = self
            .branches
            .iter()
            .map(|b| b.forward(&base))
            .collect::<Result<Vec<_>>>()?;
        if outs.len() == 1 {
            return Ok(outs.into_iter().next().expect("one branch"));
        }
        Matrix::hconcat(&outs.iter().collect::<Vec<_>>())
    }

    pub fn logits(&self, batch: &Matrix) -> Result<Matrix> {
        self.head.logits(&self.features(batch)?)
    }

    /// Features plus taps of every layer; branch taps are prefixed with
    /// `b{k}/` when the network has more than one branch.
    pub fn forward_with_taps(&self, batch: &Matrix) -> Result<(Matrix, LayerTapSet)> {
        let mut ids = Vec::new();
        let mut acts = Vec::new();
        let base = match &self.stem {
            Some(s) => {
                let (out, taps) = s.forward_with_taps(batch)?;
                ids.extend(taps.layer_ids().iter().cloned());
                acts.extend(taps.activations().iter().cloned());
                out
            }
            None => batch.clone(),
        };
        let multi = self.branches.len() > 1;
        let mut outs = Vec::with_capacity(self.branches.len());
        for (k, b) in self.branches.iter().enumerate() {
            let (out, taps) = b.forward_with_taps(&base)?;
            for id in taps.layer_ids() {
                ids.push(if multi { format!("b{k}/{id}") } else { id.clone() });
            }
            acts.extend(taps.activations().iter().cloned());
            outs.push(out);
        }
        let features = Matrix::hconcat(&outs.iter().collect::<Vec<_>>())?;
        Ok((features, LayerTapSet::new(ids, acts)?))
    }

    fn forward_cached(&self, batch: &Matrix) -> Result<ForwardCache> {
        let stem = self.stem.as_ref().map(|s| s.forward_cached(batch)).transpose()?;
        let base = stem.as_ref().map_or(batch, |c| c.output());
        let branches = self
            .branches
            .iter()
            .map(|b| b.forward_cached(base))
            .collect::<Result<Vec<_>>>()?;
        let features = if branches.len() == 1 {
            branches[0].output().clone()
        } else {
            Matrix::hconcat(&branches.iter().map(|c| c.output()).collect::<Vec<_>>())?
        };
        let (logits, head) = self.head.forward_cached(&features)?;
        Ok(ForwardCache {
            stem,
            branches,
            features,
            head,
            logits,
        })
    }

    /// Loss and exact gradients for every trainable parameter.
    pub fn backward(&self, batch: &Matrix, loss: &LossSpec<'_>) -> Result<(f64, GradientSet)> {
        let cache = self.forward_cached(batch)?;
        let (value, dlogits) = loss.evaluate(&cache.logits)?;

        let stem_trainable = self.stem.as_ref().is_some_and(|s| !s.is_frozen());
        let any_branch = self.branches.iter().any(|b| !b.is_frozen());
        let need_features = any_branch || stem_trainable;
        let (head_grad, dfeatures) =
            self.head
                .backward(&cache.features, &cache.head, &dlogits, !self.head_frozen)?;

        let mut branch_grads = Vec::with_capacity(self.branches.len());
        let mut dbase: Option<Matrix> = None;
        let mut offset = 0;
        for (b, bc) in self.branches.iter().zip(&cache.branches) {
            let width = b.output_dim();
            let want_params = !b.is_frozen();
            if need_features && (want_params || stem_trainable) {
                let dout = dfeatures.column_range(offset, offset + width);
                let (g, din) = b.backward(bc, dout, want_params, stem_trainable)?;
                if let Some(din) = din {
                    dbase = Some(match dbase {
                        None => din,
                        Some(mut acc) => {
                            for (a, d) in acc.as_mut_slice().iter_mut().zip(din.as_slice()) {
                                *a += d;
                            }
                            acc
                        }
                    });
                }
                branch_grads.push(g);
            } else {
                branch_grads.push(None);
            }
            offset += width;
        }
        let stem_grad = match (&self.stem, &cache.stem, dbase) {
            (Some(s), Some(sc), Some(d)) if stem_trainable => s.backward(sc, d, true, false)?.0,
            _ => None,
        };
        Ok((
            value,
            GradientSet {
                stem: stem_grad,
                branches: branch_grads,
                head: head_grad,
            },
        ))
    }

    /// `p ← p − lr·(g + weight_decay·p)` for every buffer in `grads`.
    pub fn sgd_step(&mut self, grads: &GradientSet, lr: f64, weight_decay: f64) -> Result<()> {
        if lr < 0.0 {
            return Err(Error::Parameter(format!("negative learning rate {lr}")));
        }
        if grads.branches.len() != self.branches.len() {
            return Err(Error::Dimension("gradient set has wrong branch count".into()));
        }
        fn apply(
            ext: &mut FeatureExtractor,
            grads: &[LayerGrad],
            lr: f64,
            weight_decay: f64,
        ) -> Result<()> {
            if ext.num_layers() != grads.len() {
                return Err(Error::Dimension("layer gradient count".into()));
            }
            for (layer, g) in ext.layers_mut().zip(grads) {
                if layer.weight.shape() != g.weight.shape() || layer.bias.len() != g.bias.len() {
                    return Err(Error::Dimension(format!("gradient shape for {}", layer.id)));
                }
                sgd_update(layer.weight.as_mut_slice(), g.weight.as_slice(), lr, weight_decay);
                sgd_update(&mut layer.bias, &g.bias, lr, weight_decay);
            }
            ext.bump_version();
            Ok(())
        }
        if let (Some(stem), Some(g)) = (self.stem.as_mut(), grads.stem.as_ref()) {
            apply(stem, g, lr, weight_decay)?;
        }
        for (b, g) in self.branches.iter_mut().zip(&grads.branches) {
            if let Some(g) = g {
                apply(b, g, lr, weight_decay)?;
            }
        }
        if let Some(hg) = &grads.head {
            self.head.apply(hg, lr, weight_decay)?;
        }
        Ok(())
    }

    /// Every parameter tensor with a stable key and its shape.
    pub fn named_params(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        type Named<'a> = Vec<(String, Vec<usize>, &'a [f64])>;
        fn push_ext<'a>(out: &mut Named<'a>, prefix: &str, ext: &'a FeatureExtractor) {
            for (i, l) in ext.layers().enumerate() {
                out.push((
                    format!("{prefix}.layer{i}.weight"),
                    vec![l.weight.rows(), l.weight.cols()],
                    l.weight.as_slice(),
                ));
                out.push((format!("{prefix}.layer{i}.bias"), vec![l.bias.len()], &l.bias[..]));
            }
        }
        let mut out = Vec::new();
        if let Some(s) = &self.stem {
            push_ext(&mut out, "stem", s);
        }
        for (k, b) in self.branches.iter().enumerate() {
            push_ext(&mut out, &format!("branch{k}"), b);
        }
        let w = self.head.weight();
        out.push(("head.weight".into(), vec![w.rows(), w.cols()], w.as_slice()));
        match &self.head {
            Head::Linear(l) => {
                if let Some(b) = &l.bias {
                    out.push(("head.bias".into(), vec![b.len()], &b[..]));
                }
            }
            Head::Cosine(c) => {
                out.push(("head.scale".into(), vec![1], std::slice::from_ref(&c.scale)));
            }
        }
        out
    }

    /// Mutable views keyed like [`Network::named_params`].
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        fn push_ext<'a>(
            out: &mut Vec<(String, &'a mut [f64])>,
            prefix: &str,
            ext: &'a mut FeatureExtractor,
        ) {
            for (i, l) in ext.layers_mut().enumerate() {
                out.push((format!("{prefix}.layer{i}.weight"), l.weight.as_mut_slice()));
                out.push((format!("{prefix}.layer{i}.bias"), &mut l.bias[..]));
            }
        }
        if let Some(s) = &mut self.stem {
            push_ext(&mut out, "stem", s);
        }
        for (k, b) in self.branches.iter_mut().enumerate() {
            push_ext(&mut out, &format!("branch{k}"), b);
        }
        match &mut self.head {
            Head::Linear(l) => {
                out.push(("head.weight".into(), l.weight.as_mut_slice()));
                if let Some(b) = &mut l.bias {
                    out.push(("head.bias".into(), &mut b[..]));
                }
            }
            Head::Cosine(c) => {
                out.push(("head.weight".into(), c.weight.as_mut_slice()));
                out.push(("head.scale".into(), std::slice::from_mut(&mut c.scale)));
            }
        }
        out
    }

    /// Multiply-accumulates of one forward pass, summed over stem, every
    /// branch, and the head.
    pub fn macs(&self) -> u64 {
        let extractors: Vec<&FeatureExtractor> =
            self.stem.iter().chain(self.branches.iter()).collect();
        count_macs(&extractors, &[&self.head])
    }

    /// SHA-256 over every extractor parameter, in layout order.
    pub fn extractor_digest(&self) -> String {
        let mut h = Sha256::new();
        for ext in self.stem.iter().chain(self.branches.iter()) {
            digest_extractor(&mut h, ext);
        }
        hex(&h.finalize())
    }

    /// SHA-256 over one branch (with the stem folded in first).
    pub fn branch_digest(&self, k: usize) -> String {
        let mut h = Sha256::new();
        if let Some(s) = &self.stem {
            digest_extractor(&mut h, s);
        }
        digest_extractor(&mut h, &self.branches[k]);
        hex(&h.finalize())
    }

    /// SHA-256 over all parameters including the head.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for ext in self.stem.iter().chain(self.branches.iter()) {
            digest_extractor(&mut h, ext);
        }
        for v in self.head.weight().as_slice() {
            h.update(v.to_le_bytes());
        }
        hex(&h.finalize())
    }
}

/// Digest of one extractor's parameters.
pub fn extractor_digest(ext: &FeatureExtractor) -> String {
    let mut h = Sha256::new();
    digest_extractor(&mut h, ext);
    hex(&h.finalize())
}

fn digest_extractor(h: &mut Sha256, ext: &FeatureExtractor) {
    for layer in ext.layers() {
        h.update(layer.id.as_bytes());
        for v in layer.weight.as_slice().iter().chain(&layer.bias) {
            h.update(v.to_le_bytes());
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Total multiply-accumulates of the given extractors and heads for a single
/// input vector.
pub fn count_macs(extractors: &[&FeatureExtractor], heads: &[&Head]) -> u64 {
    extractors.iter().map(|e| e.macs()).sum::<u64>() + heads.iter().map(|h| h.macs()).sum::<u64>()
}
