//! Pyramidal RNN embedding: one `D`-dimensional token per univariate series.
//!
//! The pyramid is derived from a list of period lengths ("windows"). Level `l`
//! convolves level `l-1` with kernel = stride = `floor(W_l / W_{l-1})`
//! (with `W_0 = 1`, the raw sampling step), so each position at level `l`
//! summarizes one period of length `W_l`. The top-down path upsamples the
//! coarsest feature level by level and adds it to each bottom-up feature.
//! Each fused level is read by its own GRU, the last hidden states are
//! weighted by a temperature softmax over learnable scale logits,
//! concatenated, and mixed by a linear layer into the embedding.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{softmax_temp, upsample_repeat, Conv1d, Gru, Linear};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Pyramid geometry for a given lookback.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PyramidConfig {
    pub windows: Vec<usize>,
    /// kernel (= stride) per level
    pub kernels: Vec<usize>,
    /// sequence length per level for `lookback`
    pub level_lengths: Vec<usize>,
    pub lookback: usize,
    /// non-fatal notes, e.g. window ratios that floor to a kernel of 1
    pub warnings: Vec<String>,
}

impl PyramidConfig {
    pub fn levels(&self) -> usize {
        self.windows.len()
    }

    /// Keeps only the bottom `levels` levels.
    pub fn truncated(&self, levels: usize) -> PyramidConfig {
        let levels = levels.clamp(1, self.levels());
        PyramidConfig {
            windows: self.windows[..levels].to_vec(),
            kernels: self.kernels[..levels].to_vec(),
            level_lengths: self.level_lengths[..levels].to_vec(),
            lookback: self.lookback,
            warnings: self.warnings.clone(),
        }
    }
}

pub fn build_pyramid_config(windows: &[usize], lookback: usize) -> Result<PyramidConfig> {
    if windows.is_empty() {
        return Err(Error::config("pyramidal_windows must not be empty"));
    }
    if windows[0] == 0 {
        return Err(Error::config("pyramidal_windows must be positive"));
    }
    if let Some(w) = windows.windows(2).find(|w| w[1] <= w[0]) {
        return Err(Error::config(format!(
            "pyramidal_windows must be strictly ascending, found {} after {}",
            w[1], w[0]
        )));
    }
    let top = *windows.last().unwrap();
    if lookback < top {
        return Err(Error::config(format!(
            "lookback {lookback} is shorter than the top window {top}"
        )));
    }
    let mut kernels = Vec::with_capacity(windows.len());
    let mut level_lengths = Vec::with_capacity(windows.len());
    let mut warnings = Vec::new();
    let (mut prev_window, mut len) = (1, lookback);
    for &w in windows {
        let k = w / prev_window;
        if w % prev_window != 0 {
            warnings.push(format!(
                "window {w} is not a multiple of {prev_window}; kernel floors to {k}{}",
                if k == 1 { " (no temporal downsampling at this level)" } else { "" }
            ));
        }
        len /= k;
        if len == 0 {
            return Err(Error::config(format!("pyramid level for window {w} would be empty")));
        }
        kernels.push(k);
        level_lengths.push(len);
        prev_window = w;
    }
    Ok(PyramidConfig {
        windows: windows.to_vec(),
        kernels,
        level_lengths,
        lookback,
        warnings,
    })
}

/// Per-level GRU hidden sizes: `floor(D / levels)` each. In strict mode `D`
/// must divide evenly; otherwise the last level absorbs the remainder.
pub fn hidden_sizes(d_model: usize, levels: usize, strict: bool) -> Result<Vec<usize>> {
    if levels == 0 || d_model < levels {
        return Err(Error::config(format!(
            "d_model {d_model} must be at least the number of pyramid levels {levels}"
        )));
    }
    let base = d_model / levels;
    let rem = d_model % levels;
    if strict && rem != 0 {
        return Err(Error::config(format!(
            "d_model {d_model} is not divisible by {levels} pyramid levels"
        )));
    }
    let mut sizes = vec![base; levels];
    *sizes.last_mut().unwrap() += rem;
    Ok(sizes)
}

/// Parameters and geometry of one PRE block (shared by every variable).
#[derive(Clone, Debug)]
pub struct Pre {
    pub pyramid: PyramidConfig,
    pub convs: Vec<Conv1d>,
    pub grus: Vec<Gru>,
    /// scale logits, initialized to `1 / levels`
    pub alpha: ParamId,
    pub fusion: Linear,
    pub d_model: usize,
}

impl Pre {
    /// Builds a PRE whose level `i` GRU has `hidden[i]` units.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        pyramid: PyramidConfig,
        conv_channels: usize,
        hidden: &[usize],
        d_model: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let levels = pyramid.levels();
        if hidden.len() != levels {
            return Err(Error::config(format!(
                "{} GRU sizes given for {levels} pyramid levels",
                hidden.len()
            )));
        }
        if conv_channels == 0 {
            return Err(Error::config("conv_channels must be positive"));
        }
        let mut convs = Vec::with_capacity(levels);
        let mut grus = Vec::with_capacity(levels);
        for (i, &k) in pyramid.kernels.iter().enumerate() {
            let in_ch = if i == 0 { 1 } else { conv_channels };
            convs.push(Conv1d::new(store, &format!("{name}.level{i}.conv"), in_ch, conv_channels, k, rng)?);
        }
        for (i, &h) in hidden.iter().enumerate() {
            grus.push(Gru::new(store, &format!("{name}.level{i}.gru"), conv_channels, h, rng)?);
        }
        let alpha = store.add(
            format!("{name}.alpha"),
            Tensor::full([levels], T::from_f64(1.0 / levels as f64)),
        )?;
        let concat_dim: usize = hidden.iter().sum();
        let fusion = Linear::new(store, &format!("{name}.fusion"), concat_dim, d_model, rng)?;
        Ok(Pre { pyramid, convs, grus, alpha, fusion, d_model })
    }

    pub fn levels(&self) -> usize {
        self.pyramid.levels()
    }

    /// `x: [N, L, 1]` to one feature per level, `[N, level_len, conv_channels]`.
    pub fn bottom_up<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Vec<Var>> {
        let shape = tape.shape(x);
        if shape.len() != 3 || shape[1] != self.pyramid.lookback {
            return Err(Error::shape("pre.bottom_up", shape, &[self.pyramid.lookback]));
        }
        let mut feats = Vec::with_capacity(self.levels());
        let mut cur = x;
        for conv in &self.convs {
            cur = conv.forward(tape, p, cur)?;
            feats.push(cur);
        }
        Ok(feats)
    }

    /// Per-level GRUs, temperature-weighted concat and fusion: `[N, D]`.
    pub fn multi_scale_rnn<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        fused: &[Var],
        temperature: f64,
    ) -> Result<Var> {
        if fused.len() != self.levels() {
            return Err(Error::invalid(format!(
                "{} fused features for {} GRUs",
                fused.len(),
                self.levels()
            )));
        }
        let beta = self.scale_weights(tape, p, temperature)?;
        let mut parts = Vec::with_capacity(fused.len());
        for (i, (&feat, gru)) in fused.iter().zip(&self.grus).enumerate() {
            let h = gru.forward(tape, p, feat, None, false)?.last;
            let b = tape.slice(beta, 0, i, i + 1)?;
            parts.push(tape.mul(h, b)?);
        }
        let h = if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 1)? };
        self.fusion.forward(tape, p, h)
    }

    /// `softmax(alpha / T)`, shape `[levels]`.
    pub fn scale_weights<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, temperature: f64) -> Result<Var> {
        softmax_temp(tape, p[self.alpha], temperature)
    }

    /// Embeds a batch of univariate series `[N, L]` into `[N, D]`.
    pub fn embed<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        series: Var,
        temperature: f64,
    ) -> Result<Var> {
        let shape = tape.shape(series).to_vec();
        if shape.len() != 2 || shape[1] != self.pyramid.lookback {
            return Err(Error::shape("pre.embed", &shape, &[self.pyramid.lookback]));
        }
        let x = tape.reshape(series, &[shape[0], shape[1], 1])?;
        let feats = self.bottom_up(tape, p, x)?;
        let fused = top_down_fuse(tape, &feats)?;
        self.multi_scale_rnn(tape, p, &fused, temperature)
    }

    /// Embedding of a single series of length `L`, shape `[D]`.
    pub fn pre_embed<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        series: Var,
        temperature: f64,
    ) -> Result<Var> {
        let l = tape.shape(series).to_vec();
        if l.len() != 1 {
            return Err(Error::shape("pre_embed", &l, &[self.pyramid.lookback]));
        }
        let x = tape.reshape(series, &[1, l[0]])?;
        let h = self.embed(tape, p, x, temperature)?;
        tape.reshape(h, &[self.d_model])
    }
}

/// Top-down pathway with lateral additions over features ordered bottom to
/// top, each `[N, len, ch]`.
///
/// The coarsest feature passes through unchanged. Going down, the running
/// top-down signal is upsampled to the next level's length and added to that
/// level's bottom-up feature.
pub fn top_down_fuse<T: Real>(tape: &mut Tape<T>, features: &[Var]) -> Result<Vec<Var>> {
    let Some(&top) = features.last() else {
        return Err(Error::invalid("top_down_fuse needs at least one level"));
    };
    let mut out = vec![top; features.len()];
    let mut carried = top;
    for i in (0..features.len() - 1).rev() {
        let lateral = features[i];
        let len = tape.shape(lateral)[1];
        carried = upsample_repeat(tape, carried, 1, len)?;
        out[i] = tape.add(carried, lateral)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::tensor::grad_check_many;

    fn mini(windows: &[usize], lookback: usize, d: usize, seed: u64) -> (ParamStore<f64>, Pre) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = build_pyramid_config(windows, lookback).unwrap();
        let hidden = hidden_sizes(d, cfg.levels(), false).unwrap();
        let mut store = ParamStore::new();
        let pre = Pre::new(&mut store, "pre", cfg, 4, &hidden, d, &mut rng).unwrap();
        (store, pre)
    }

    fn series(n: usize, len: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new([n, len], (0..n * len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn pyramid_from_period_lists() {
        let cfg = build_pyramid_config(&[24, 48, 96], 720).unwrap();
        assert_eq!(cfg.kernels, vec![24, 2, 2]);
        assert_eq!(cfg.level_lengths, vec![30, 15, 7]);
        assert!(cfg.warnings.is_empty());

        let cfg = build_pyramid_config(&[24, 48, 72, 144], 720).unwrap();
        assert_eq!(cfg.kernels, vec![24, 2, 1, 2]);
        assert_eq!(cfg.level_lengths, vec![30, 15, 15, 7]);
        assert_eq!(cfg.warnings.len(), 1);

        for l in [1, 17, 720] {
            let cfg = build_pyramid_config(&[l], l).unwrap();
            assert_eq!(cfg.kernels, vec![l]);
            assert_eq!(cfg.level_lengths, vec![1]);
        }
    }

    #[test]
    fn pyramid_rejects_bad_configs() {
        assert!(build_pyramid_config(&[24, 96], 48).is_err());
        assert!(build_pyramid_config(&[48, 24], 720).is_err());
        assert!(build_pyramid_config(&[24, 24], 720).is_err());
        assert!(build_pyramid_config(&[], 720).is_err());
        assert!(build_pyramid_config(&[0, 4], 720).is_err());
    }

    #[test]
    fn hidden_split() {
        assert_eq!(hidden_sizes(720, 4, true).unwrap(), vec![180; 4]);
        assert_eq!(hidden_sizes(720, 4, true).unwrap().iter().sum::<usize>(), 720);
        assert_eq!(hidden_sizes(10, 3, false).unwrap(), vec![3, 3, 4]);
        assert!(hidden_sizes(10, 3, true).is_err());
        assert!(hidden_sizes(2, 3, false).is_err());
    }

    #[test]
    fn bottom_up_shapes_and_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = build_pyramid_config(&[24, 48, 96], 720).unwrap();
        let mut store = ParamStore::<f64>::new();
        let pre = Pre::new(&mut store, "pre", cfg, 5, &[8, 8, 8], 24, &mut rng).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(series(3, 720, 2).reshape([3, 720, 1]).unwrap());
        let feats = pre.bottom_up(&mut tape, &p, x).unwrap();
        let lens: Vec<_> = feats.iter().map(|&f| tape.shape(f).to_vec()).collect();
        assert_eq!(lens, vec![vec![3, 30, 5], vec![3, 15, 5], vec![3, 7, 5]]);

        for conv in &pre.convs {
            store.get_mut(conv.weight).data_mut().fill(0.0);
            store.get_mut(conv.bias).data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(series(3, 720, 2).reshape([3, 720, 1]).unwrap());
        for f in pre.bottom_up(&mut tape, &p, x).unwrap() {
            assert!(tape.value(f).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn kernel_one_level_is_pointwise_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = build_pyramid_config(&[1], 6).unwrap();
        let mut store = ParamStore::<f64>::new();
        let pre = Pre::new(&mut store, "pre", cfg, 3, &[2], 2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xs = series(1, 6, 3);
        let x = tape.constant(xs.reshape([1, 6, 1]).unwrap());
        let f = pre.bottom_up(&mut tape, &p, x).unwrap()[0];
        let (w, b) = (store.get(pre.convs[0].weight), store.get(pre.convs[0].bias));
        for t in 0..6 {
            for c in 0..3 {
                let expected = w.data()[c] * xs.data()[t] + b.data()[c];
                assert!((tape.value(f).at(&[0, t, c]) - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn top_down_fuse_examples() {
        let mut tape = Tape::<f64>::new();
        let single = tape.constant(Tensor::new([1, 3, 1], vec![1., 2., 3.]).unwrap());
        assert_eq!(top_down_fuse(&mut tape, &[single]).unwrap(), vec![single]);

        let bottom = tape.constant(Tensor::zeros([1, 4, 1]));
        let top = tape.constant(Tensor::new([1, 2, 1], vec![1., 2.]).unwrap());
        let fused = top_down_fuse(&mut tape, &[bottom, top]).unwrap();
        assert_eq!(tape.value(fused[0]).data(), &[1., 1., 2., 2.]);
        assert_eq!(fused[1], top);

        let a = tape.constant(series(2, 8, 1).reshape([1, 8, 2]).unwrap());
        let b = tape.constant(series(2, 4, 2).reshape([1, 4, 2]).unwrap());
        let zero_top = tape.constant(Tensor::zeros([1, 2, 2]));
        let fused = top_down_fuse(&mut tape, &[a, b, zero_top]).unwrap();
        assert_eq!(tape.value(fused[0]), tape.value(a));
        assert_eq!(tape.value(fused[1]), tape.value(b));
    }

    #[test]
    fn initial_scale_weights_are_uniform() {
        let (store, pre) = mini(&[4, 8, 16], 48, 12, 0);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let beta = pre.scale_weights(&mut tape, &p, 1.0).unwrap();
        assert!(tape.value(beta).data().iter().all(|&b| (b - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn small_temperature_makes_weights_one_hot() {
        let (mut store, pre) = mini(&[4, 8, 16], 48, 12, 0);
        store.get_mut(pre.alpha).data_mut().copy_from_slice(&[0.30, 0.33, 0.31]);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let beta = pre.scale_weights(&mut tape, &p, 1e-3).unwrap();
        let b = tape.value(beta).data();
        assert!((b[1] - 1.0).abs() < 1e-6 && b[0] < 1e-6 && b[2] < 1e-6);
    }

    #[test]
    fn zero_grus_yield_fusion_bias() {
        let (mut store, pre) = mini(&[4, 8], 48, 8, 3);
        for gru in &pre.grus {
            for id in [gru.w_input, gru.w_recurrent, gru.bias] {
                store.get_mut(id).data_mut().fill(0.0);
            }
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(series(2, 48, 5));
        let h = pre.embed(&mut tape, &p, x, 1.0).unwrap();
        let bias = store.get(pre.fusion.bias).data();
        for row in tape.value(h).data().chunks(8) {
            assert_eq!(row, bias);
        }
    }

    #[test]
    fn embedding_dim_is_d_model_and_weights_are_shared() {
        for (windows, l, d) in [(vec![4, 8], 48, 16), (vec![3, 6, 12], 50, 10), (vec![24], 24, 7)] {
            let (store, pre) = mini(&windows, l, d, 7);
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let s = series(1, l, 9);
            let one = tape.constant(s.reshape([l]).unwrap());
            let h = pre.pre_embed(&mut tape, &p, one, 1.0).unwrap();
            assert_eq!(tape.shape(h), &[d]);
            let mut twice = s.data().to_vec();
            twice.extend_from_slice(s.data());
            let both = tape.constant(Tensor::new([2, l], twice).unwrap());
            let hb = pre.embed(&mut tape, &p, both, 1.0).unwrap();
            let v = tape.value(hb).data();
            assert_eq!(&v[..d], &v[d..]);
            assert!(tape.value(h).max_abs_diff(&Tensor::from_vec(v[..d].to_vec())) < 1e-12);
        }
    }

    #[test]
    fn pre_gradients_match_finite_differences() {
        let (store, pre) = mini(&[4, 8], 24, 6, 11);
        let x = series(2, 24, 12);
        let mut points = vec![x];
        points.extend(store.values().iter().cloned());
        let report = grad_check_many(
            |tape, vars| {
                let p = Bound::from_vars(vars[1..].to_vec());
                let h = pre.embed(tape, &p, vars[0], 0.7)?;
                let t = tape.tanh(h);
                let sq = tape.mul(t, h)?;
                Ok(tape.sum_all(sq))
            },
            &points,
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn cost_is_linear_in_lookback() {
        let cost = |l: usize| {
            let (store, pre) = mini(&[24, 48, 96], l, 32, 1);
            let mut tape = Tape::new();
            let p = store.bind_frozen(&mut tape);
            let start = tape.len();
            let x = tape.constant(series(4, l, 2));
            pre.embed(&mut tape, &p, x, 1.0).unwrap();
            tape.flops_since(start)
        };
        for l in [720, 1440] {
            let ratio = cost(2 * l) as f64 / cost(l) as f64;
            assert!((1.8..=2.2).contains(&ratio), "L={l}: ratio {ratio}");
        }
    }
}
