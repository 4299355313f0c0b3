//! Fused sequence assembly, the presence-masked transformer and the
//! two-class readout.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{AttnLayout, Dropout, Linear, StackCache, TransformerStack};
use crate::params::ParamStore;

/// One modality's augmented embeddings, ready to be concatenated.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedBlock {
    pub values: Array2<f64>,
    pub presence: Vec<bool>,
    pub positions: Vec<usize>,
}

/// Concatenation of the augmented modality blocks with per-row metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedSequence {
    pub values: Array2<f64>,
    pub mask: Vec<bool>,
    pub modality_of: Vec<usize>,
    pub position_of: Vec<usize>,
}

impl FusedSequence {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn present_rows(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Concatenates `blocks[order[0]] ++ blocks[order[1]] ++ ...`.
pub fn concat_modalities(blocks: &[AugmentedBlock], order: &[usize]) -> Result<FusedSequence> {
    let mut seen = vec![false; blocks.len()];
    for &m in order {
        if m >= blocks.len() || std::mem::replace(&mut seen[m], true) {
            return Err(Error::Contract(format!("modality {m} repeated or out of range in concat order")));
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::Contract("concat order misses a modality".into()));
    }
    let dim = blocks.first().map_or(0, |b| b.values.ncols());
    let total: usize = blocks.iter().map(|b| b.values.nrows()).sum();
    let mut values = Array2::zeros((total, dim));
    let (mut mask, mut modality_of, mut position_of) = (Vec::new(), Vec::new(), Vec::new());
    let mut offset = 0;
    for &m in order {
        let block = &blocks[m];
        let n = block.values.nrows();
        if block.values.ncols() != dim || block.presence.len() != n || block.positions.len() != n {
            return Err(Error::Contract(format!("block {m} has inconsistent shape")));
        }
        values.slice_mut(ndarray::s![offset..offset + n, ..]).assign(&block.values);
        mask.extend_from_slice(&block.presence);
        modality_of.extend(std::iter::repeat_n(m, n));
        position_of.extend_from_slice(&block.positions);
        offset += n;
    }
    Ok(FusedSequence { values, mask, modality_of, position_of })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub logits: [f64; 2],
    pub probabilities: [f64; 2],
    pub label: u8,
    pub window_start: f64,
}

impl Prediction {
    pub fn from_logits(logits: [f64; 2], window_start: f64) -> Self {
        let m = logits[0].max(logits[1]);
        let e = [(logits[0] - m).exp(), (logits[1] - m).exp()];
        let z = e[0] + e[1];
        let probabilities = [e[0] / z, e[1] / z];
        let label = u8::from(logits[1] > logits[0]);
        Self { logits, probabilities, label, window_start }
    }
}

/// Two-class cross entropy of `softmax(logits)` against `label`.
pub fn classification_loss(logits: [f64; 2], label: u8) -> Result<f64> {
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite logits {logits:?}")));
    }
    let m = logits[0].max(logits[1]);
    let lse = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
    Ok(lse - logits[label as usize])
}

/// Gradient of the loss with respect to the logits: `p - onehot(label)`.
pub fn loss_gradient(pred: &Prediction, label: u8) -> [f64; 2] {
    let mut g = pred.probabilities;
    g[label as usize] -= 1.0;
    g
}

/// Transformer layers over the fused sequence plus the classification head.
#[derive(Debug, Clone)]
pub struct FusionParams {
    pub stack: TransformerStack,
    pub head: Linear,
}

#[derive(Debug, Clone)]
pub struct FusionCache {
    stack: StackCache,
    rows: Vec<usize>,
    len: usize,
    pooled: Array2<f64>,
}

impl FusionParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        layers: usize,
        heads: usize,
        ff_dim: usize,
        std: f64,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("{heads} heads do not divide width {dim}")));
        }
        Ok(Self {
            stack: TransformerStack::new(store, rng, &format!("{name}.encoder"), layers, dim, heads, ff_dim, std),
            head: Linear::new(store, rng, &format!("{name}.head"), dim, 2, std),
        })
    }

    /// Masked encoder, mean pooling over present rows, linear head.
    pub fn forward(
        &self,
        p: &ParamStore,
        fused: &FusedSequence,
        window_start: f64,
        dropout: Option<&mut Dropout<'_>>,
    ) -> Result<(Prediction, FusionCache)> {
        let present = fused.present_rows();
        if present == 0 {
            return Err(Error::EmptyWindow);
        }
        // Absent rows are never attended to and are excluded from pooling, so
        // the stack only needs to run on the present ones.
        let rows: Vec<usize> = (0..fused.len()).filter(|&t| fused.mask[t]).collect();
        let all = vec![true; present];
        let (states, stack) = self
            .stack
            .forward(p, fused.values.select(Axis(0), &rows), AttnLayout::Masked(&all), dropout)?;
        let pooled = states.mean_axis(Axis(0)).expect("present rows").insert_axis(Axis(0));
        let out = self.head.forward(p, pooled.view());
        let pred = Prediction::from_logits([out[[0, 0]], out[[0, 1]]], window_start);
        Ok((pred, FusionCache { stack, rows, len: fused.len(), pooled }))
    }

    /// Returns the gradient with respect to the fused input values.
    pub fn backward(&self, p: &ParamStore, g: &mut ParamStore, cache: &FusionCache, d_logits: [f64; 2]) -> Array2<f64> {
        let dy = Array2::from_shape_vec((1, 2), d_logits.to_vec()).expect("1x2");
        let d_pooled = self.head.backward(p, g, cache.pooled.view(), dy.view());
        let present = cache.rows.len();
        let share = d_pooled.row(0).mapv(|v| v / present as f64);
        let d_states = share.broadcast((present, share.len())).expect("row broadcast").to_owned();
        let d_present = self.stack.backward(p, g, &cache.stack, d_states.view());
        let mut d_fused = Array2::zeros((cache.len, d_present.ncols()));
        for (row, &t) in d_present.rows().into_iter().zip(&cache.rows) {
            d_fused.row_mut(t).assign(&row);
        }
        d_fused
    }
}

/// Convenience for tests and tools: splits fused-row gradients back into
/// per-block slices following `order`.
pub fn split_rows<'a>(d: &'a Array2<f64>, lengths: &[usize], order: &[usize]) -> Vec<ArrayView2<'a, f64>> {
    let mut out = vec![d.slice(ndarray::s![0..0, ..]); lengths.len()];
    let mut offset = 0;
    for &m in order {
        out[m] = d.slice(ndarray::s![offset..offset + lengths[m], ..]);
        offset += lengths[m];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(rng: &mut ChaCha8Rng, n: usize, d: usize, presence: Vec<bool>) -> AugmentedBlock {
        AugmentedBlock {
            values: Array2::from_shape_simple_fn((n, d), || rng.random::<f64>() * 2.0 - 1.0),
            presence,
            positions: (0..n).collect(),
        }
    }

    fn toy(d: usize, layers: usize, heads: usize) -> (FusionParams, ParamStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = ParamStore::new();
        let f = FusionParams::new(&mut p, &mut rng, "fusion", d, layers, heads, 4 * d, 0.3).unwrap();
        (f, p)
    }

    #[test]
    fn concat_lengths_and_metadata() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let blocks = vec![block(&mut rng, 600, 2, vec![true; 600]), block(&mut rng, 150, 2, vec![false; 150])];
        let fused = concat_modalities(&blocks, &[0, 1]).unwrap();
        assert_eq!(fused.len(), 750);
        assert_eq!(fused.modality_of[600], 1);
        assert_eq!(fused.present_rows(), 600);
        let single = concat_modalities(&blocks[..1], &[0]).unwrap();
        assert_eq!(single.values, blocks[0].values);
        let rev = concat_modalities(&blocks, &[1, 0]).unwrap();
        assert_eq!(rev.values.row(0), fused.values.row(600));
        assert_eq!(rev.values.row(150), fused.values.row(0));
        assert_eq!(rev.modality_of[0], 1);
        assert!(matches!(concat_modalities(&blocks, &[0, 0]), Err(Error::Contract(_))));
        assert!(matches!(concat_modalities(&blocks, &[1]), Err(Error::Contract(_))));
    }

    #[test]
    fn toy_forward_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (f, p) = toy(4, 1, 2);
        let fused = concat_modalities(&[block(&mut rng, 6, 4, vec![true; 6])], &[0]).unwrap();
        let (pred, _) = f.forward(&p, &fused, 1.5, None).unwrap();
        assert!((pred.probabilities[0] + pred.probabilities[1] - 1.0).abs() < 1e-12);
        assert_eq!(pred.window_start, 1.5);
        assert!(pred.label <= 1);
    }

    #[test]
    fn masked_rows_do_not_change_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (f, p) = toy(8, 2, 2);
        let presence: Vec<bool> = (0..10).map(|i| i % 3 != 0).collect();
        let mut fused = concat_modalities(&[block(&mut rng, 10, 8, presence.clone())], &[0]).unwrap();
        let before = f.forward(&p, &fused, 0.0, None).unwrap().0;
        for (t, &m) in presence.iter().enumerate() {
            if !m {
                fused.values.row_mut(t).fill(rng.random::<f64>() * 100.0);
            }
        }
        let after = f.forward(&p, &fused, 0.0, None).unwrap().0;
        for c in 0..2 {
            assert!((before.logits[c] - after.logits[c]).abs() < 1e-6);
        }
    }

    #[test]
    fn block_order_does_not_change_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (f, p) = toy(8, 2, 2);
        let blocks = vec![
            block(&mut rng, 7, 8, vec![true; 7]),
            block(&mut rng, 3, 8, vec![true, false, true]),
            block(&mut rng, 5, 8, vec![false; 5]),
        ];
        let a = f.forward(&p, &concat_modalities(&blocks, &[0, 1, 2]).unwrap(), 0.0, None).unwrap().0;
        let b = f.forward(&p, &concat_modalities(&blocks, &[2, 0, 1]).unwrap(), 0.0, None).unwrap().0;
        assert!((a.logits[0] - b.logits[0]).abs() < 1e-9 && (a.logits[1] - b.logits[1]).abs() < 1e-9);
    }

    #[test]
    fn single_present_row_pools_to_its_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (f, p) = toy(4, 1, 1);
        let fused = concat_modalities(&[block(&mut rng, 5, 4, vec![false, false, true, false, false])], &[0]).unwrap();
        let (_, cache) = f.forward(&p, &fused, 0.0, None).unwrap();
        // With one present key every query attends to it; the present row's
        // state is the stack applied to that row alone.
        let alone = concat_modalities(
            &[AugmentedBlock {
                values: fused.values.slice(ndarray::s![2..3, ..]).to_owned(),
                presence: vec![true],
                positions: vec![0],
            }],
            &[0],
        )
        .unwrap();
        let (states, _) = f.stack.forward(&p, alone.values.clone(), AttnLayout::Masked(&alone.mask), None).unwrap();
        assert!((&cache.pooled.row(0) - &states.row(0)).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn all_absent_is_an_empty_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (f, p) = toy(4, 1, 2);
        let fused = concat_modalities(&[block(&mut rng, 3, 4, vec![false; 3])], &[0]).unwrap();
        assert!(matches!(f.forward(&p, &fused, 0.0, None), Err(Error::EmptyWindow)));
    }

    #[test]
    fn loss_examples() {
        assert!((classification_loss([0.0, 0.0], 1).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(classification_loss([20.0, -20.0], 0).unwrap() < 1e-8);
        let want = -((2f64).exp() / (1f64.exp() + 2f64.exp())).ln();
        let got = classification_loss([1.0, 2.0], 1).unwrap();
        assert!((got - want).abs() < 1e-12 && (got - 0.3133).abs() < 1e-4);
        assert!(matches!(classification_loss([f64::NAN, 0.0], 0), Err(Error::Numeric(_))));
    }

    #[test]
    fn head_bias_gradient_is_probabilities_minus_one_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (f, mut p) = toy(4, 1, 2);
        p.mat_mut(f.head.w).fill(0.0);
        let fused = concat_modalities(&[block(&mut rng, 4, 4, vec![true; 4])], &[0]).unwrap();
        let (pred, cache) = f.forward(&p, &fused, 0.0, None).unwrap();
        assert_eq!(pred.probabilities, [0.5, 0.5]);
        let mut g = p.zeros_like();
        f.backward(&p, &mut g, &cache, loss_gradient(&pred, 1));
        assert_eq!(g.vec(f.head.b).to_vec(), vec![0.5, -0.5]);
    }

    #[test]
    fn fusion_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (f, mut p) = toy(4, 2, 2);
        let fused = concat_modalities(
            &[block(&mut rng, 4, 4, vec![true, false, true, true]), block(&mut rng, 2, 4, vec![true, true])],
            &[0, 1],
        )
        .unwrap();
        let loss = |p: &ParamStore, x: &FusedSequence| classification_loss(f.forward(p, x, 0.0, None).unwrap().0.logits, 1).unwrap();
        let (pred, cache) = f.forward(&p, &fused, 0.0, None).unwrap();
        let mut g = p.zeros_like();
        let dx = f.backward(&p, &mut g, &cache, loss_gradient(&pred, 1));
        let eps = 1e-5;
        for t in 0..p.len() {
            for i in 0..p.tensors()[t].numel() {
                let orig = p.tensors()[t].data[i];
                p.tensors_mut()[t].data[i] = orig + eps;
                let fp = loss(&p, &fused);
                p.tensors_mut()[t].data[i] = orig - eps;
                let fm = loss(&p, &fused);
                p.tensors_mut()[t].data[i] = orig;
                let num = (fp - fm) / (2.0 * eps);
                let ana = g.tensors()[t].data[i];
                assert!((num - ana).abs() < 1e-7 * (1.0 + num.abs()), "{}[{i}]: {num} vs {ana}", p.tensors()[t].name);
            }
        }
        for i in 0..fused.values.len() {
            let mut xp = fused.clone();
            xp.values.as_slice_mut().unwrap()[i] += eps;
            let mut xm = fused.clone();
            xm.values.as_slice_mut().unwrap()[i] -= eps;
            let num = (loss(&p, &xp) - loss(&p, &xm)) / (2.0 * eps);
            let ana = dx.as_slice().unwrap()[i];
            assert!((num - ana).abs() < 1e-7 * (1.0 + num.abs()), "input {i}: {num} vs {ana}");
        }
    }
}
