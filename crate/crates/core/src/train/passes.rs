//! Per-batch forward and backward passes for the two training objectives.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{self, BackboneCache};
use crate::data::Window;
use crate::encode::{encode, encode_backward, TemporalTokens};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::Grads;
use crate::scalar::Scalar;
use crate::transform::{channel_independence, instance_normalize, patchify, revin_denormalize, NormStats};

/// One univariate, instance-normalized look-back window cut into patches.
#[derive(Debug, Clone)]
pub struct AlignSample<T> {
    /// `T_p x P`
    pub patches: Array2<T>,
    pub tokens: TemporalTokens<T>,
}

/// Temporal lookups for a window's patches under the model's encoder config.
pub fn window_tokens<T: Scalar>(model: &Model<T>, timestamps: &[i64]) -> TemporalTokens<T> {
    let c = &model.config;
    TemporalTokens::build(
        timestamps,
        c.patch_len,
        c.stride,
        c.num_patches(),
        &c.encoder.attributes,
        c.encoder.pooling,
    )
}

/// Affine-free instance normalization, channel independence and patching:
/// one sample per channel of `window`.
pub fn alignment_samples<T: Scalar>(model: &Model<T>, window: &Window<T>) -> Result<Vec<AlignSample<T>>> {
    let c = &model.config;
    if window.t_in() != c.t_in {
        return Err(Error::shape("alignment window length", c.t_in, window.t_in()));
    }
    let (normed, _) = instance_normalize(window.x_in.view())?;
    let tokens = window_tokens(model, &window.in_timestamps);
    channel_independence(normed.view())
        .into_iter()
        .map(|series| {
            let grid = patchify(series.view(), c.patch_len, c.stride, &window.in_timestamps)?;
            Ok(AlignSample {
                patches: grid.patches,
                tokens: tokens.clone(),
            })
        })
        .collect()
}

/// Next-patch MSE over the first `T_p - 1` positions of every sample,
/// averaged over all predicted elements of the batch. Accumulates gradients
/// into `grads` when given.
pub fn alignment_loss<T: Scalar>(
    model: &Model<T>,
    samples: &[AlignSample<T>],
    mut grads: Option<&mut Grads<T>>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<T> {
    let head = model
        .align_head
        .ok_or_else(|| Error::Config("model has no alignment head".into()))?;
    let w = model.params.mat(head);
    let count: usize = samples
        .iter()
        .map(|s| (s.patches.nrows().saturating_sub(1)) * s.patches.ncols())
        .sum();
    if count == 0 {
        return Err(Error::Config("alignment batch has no predictable patches".into()));
    }
    let norm = T::of(count as f64);
    let two = T::of(2.0);
    let mut total = T::zero();
    for sample in samples {
        let grid_len = sample.patches.nrows();
        let e = encode(&model.params, &model.encoder, sample.patches.view(), &sample.tokens)?;
        let (z, cache) = backbone::forward_train(
            &model.params,
            &model.backbone,
            &model.config.backbone,
            e.view(),
            rng.as_deref_mut(),
        )?;
        let used = z.slice(s![..grid_len - 1, ..]);
        let pred = used.dot(&w.t());
        let diff = pred - sample.patches.slice(s![1.., ..]);
        total += diff.iter().fold(T::zero(), |a, &d| a + d * d);

        if let Some(g) = grads.as_deref_mut() {
            let d_pred = diff * (two / norm);
            g.add(head, d_pred.t().dot(&used).view());
            let mut dz = Array2::zeros(z.raw_dim());
            dz.slice_mut(s![..grid_len - 1, ..]).assign(&d_pred.dot(&w));
            backprop_sample(
                model,
                &cache,
                sample.patches.view(),
                &sample.tokens,
                dz.view(),
                g,
                false,
            );
        }
    }
    Ok(total / norm)
}

fn backprop_sample<T: Scalar>(
    model: &Model<T>,
    cache: &BackboneCache<T>,
    patches: ArrayView2<'_, T>,
    tokens: &TemporalTokens<T>,
    dz: ArrayView2<'_, T>,
    grads: &mut Grads<T>,
    input_grad: bool,
) -> Option<Array2<T>> {
    let de = backbone::backward(&model.params, &model.backbone, &model.config.backbone, cache, dz, grads);
    encode_backward(
        &model.params,
        &model.encoder,
        patches,
        tokens,
        de.view(),
        grads,
        input_grad,
    )
}

struct ChannelPass<T> {
    patches: Array2<T>,
    flat: Array1<T>,
    cache: BackboneCache<T>,
}

struct ForecastPass<T> {
    stats: NormStats<T>,
    standardized: Array2<T>,
    /// Head output before denormalization, `T_out x C`.
    raw: Array2<T>,
    prediction: Array2<T>,
    channels: Vec<ChannelPass<T>>,
}

fn forecast_pass<T: Scalar>(
    model: &Model<T>,
    x_in: ArrayView2<'_, T>,
    timestamps: &[i64],
    tokens: &TemporalTokens<T>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<ForecastPass<T>> {
    let c = &model.config;
    let (head, revin) = match (model.forecast_head, model.revin) {
        (Some(h), Some(r)) => (h, r),
        _ => return Err(Error::Config("model has no forecast head".into())),
    };
    let shape = c.forecast.expect("forecast head implies shape");
    if x_in.nrows() != c.t_in {
        return Err(Error::shape("forecast look-back", c.t_in, x_in.nrows()));
    }
    if x_in.ncols() != shape.channels {
        return Err(Error::shape("forecast channels", shape.channels, x_in.ncols()));
    }
    let (gamma, beta) = (model.params.vec(revin.gamma), model.params.vec(revin.beta));
    let w = model.params.mat(head);
    let stats = NormStats::of(x_in);
    let standardized = stats.standardize(x_in);
    let normed = &standardized * &gamma + beta;

    let mut raw = Array2::zeros((shape.horizon, shape.channels));
    let mut channels = Vec::with_capacity(shape.channels);
    for (ch, series) in channel_independence(normed.view()).into_iter().enumerate() {
        let grid = patchify(series.view(), c.patch_len, c.stride, timestamps)?;
        let e = encode(&model.params, &model.encoder, grid.patches.view(), tokens)?;
        let (z, cache) = backbone::forward_train(
            &model.params,
            &model.backbone,
            &c.backbone,
            e.view(),
            rng.as_deref_mut(),
        )?;
        let flat = Array1::from_iter(z.iter().copied());
        if flat.len() != w.ncols() {
            return Err(Error::shape("forecast head width", w.ncols(), flat.len()));
        }
        raw.column_mut(ch).assign(&w.dot(&flat));
        channels.push(ChannelPass {
            patches: grid.patches,
            flat,
            cache,
        });
    }
    let prediction = revin_denormalize(raw.view(), &stats, gamma, beta)?;
    Ok(ForecastPass {
        stats,
        standardized,
        raw,
        prediction,
        channels,
    })
}

/// RevIN-normalize, channel-split, patch, encode, run the stack, flatten,
/// apply the forecast head and denormalize: `T_in x C -> T_out x C`.
pub fn forecast_forward<T: Scalar>(model: &Model<T>, x_in: ArrayView2<'_, T>, timestamps: &[i64]) -> Result<Array2<T>> {
    let tokens = window_tokens(model, timestamps);
    Ok(forecast_pass(model, x_in, timestamps, &tokens, None)?.prediction)
}

/// Forecast window with its temporal lookups precomputed.
#[derive(Debug, Clone)]
pub struct ForecastSample<T> {
    pub window: Window<T>,
    pub tokens: TemporalTokens<T>,
}

impl<T: Scalar> ForecastSample<T> {
    pub fn new(model: &Model<T>, window: Window<T>) -> Self {
        let tokens = window_tokens(model, &window.in_timestamps);
        Self { window, tokens }
    }
}

/// Forecast MSE averaged over every element of the batch's targets.
pub fn forecast_loss<T: Scalar>(
    model: &Model<T>,
    samples: &[ForecastSample<T>],
    mut grads: Option<&mut Grads<T>>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<T> {
    let count: usize = samples.iter().map(|s| s.window.x_out.len()).sum();
    if count == 0 {
        return Err(Error::Config("forecast batch is empty".into()));
    }
    let norm = T::of(count as f64);
    let two = T::of(2.0);
    let mut total = T::zero();
    for sample in samples {
        let win = &sample.window;
        let pass = forecast_pass(
            model,
            win.x_in.view(),
            &win.in_timestamps,
            &sample.tokens,
            rng.as_deref_mut(),
        )?;
        if pass.prediction.dim() != win.x_out.dim() {
            return Err(Error::shape(
                "forecast target",
                format!("{:?}", pass.prediction.dim()),
                format!("{:?}", win.x_out.dim()),
            ));
        }
        let diff = &pass.prediction - &win.x_out;
        total += diff.iter().fold(T::zero(), |a, &d| a + d * d);
        if let Some(g) = grads.as_deref_mut() {
            forecast_backward(model, &pass, &sample.tokens, (diff * (two / norm)).view(), g);
        }
    }
    Ok(total / norm)
}

fn forecast_backward<T: Scalar>(
    model: &Model<T>,
    pass: &ForecastPass<T>,
    tokens: &TemporalTokens<T>,
    d_pred: ArrayView2<'_, T>,
    grads: &mut Grads<T>,
) {
    let c = &model.config;
    let head = model.forecast_head.expect("checked in forward");
    let revin = model.revin.expect("checked in forward");
    let gamma = model.params.vec(revin.gamma);
    let beta = model.params.vec(revin.beta);
    let w = model.params.mat(head);
    let revin_trainable = grads.wants(revin.gamma) || grads.wants(revin.beta);

    // x_hat = (raw - beta) / gamma * std + mean
    let factor = &pass.stats.std / &gamma;
    let d_raw = &d_pred * &factor;
    let mut d_gamma = Array1::zeros(gamma.len());
    let mut d_beta = Array1::zeros(gamma.len());
    if revin_trainable {
        let centered = &pass.raw - &beta;
        d_gamma -= &(&d_raw * &centered / gamma).sum_axis(Axis(0));
        d_beta -= &d_raw.sum_axis(Axis(0));
    }

    for (ch, cp) in pass.channels.iter().enumerate() {
        let dy = d_raw.column(ch);
        if grads.wants(head) {
            let outer = dy.view().insert_axis(Axis(1)).dot(&cp.flat.view().insert_axis(Axis(0)));
            grads.add(head, outer.view());
        }
        let d_flat = w.t().dot(&dy);
        let dz = d_flat
            .into_shape_with_order((c.num_patches(), c.backbone.d_model))
            .expect("flattened row-major");
        let d_patches = backprop_sample(
            model,
            &cp.cache,
            cp.patches.view(),
            tokens,
            dz.view(),
            grads,
            revin_trainable,
        );
        if let Some(dp) = d_patches {
            // patches -> series, then through normed = gamma * z + beta
            let mut d_series = Array1::<T>::zeros(c.t_in);
            for (j, row) in dp.rows().into_iter().enumerate() {
                let mut dst = d_series.slice_mut(s![j * c.stride..j * c.stride + c.patch_len]);
                dst += &row;
            }
            d_gamma[ch] += d_series.dot(&pass.standardized.column(ch));
            d_beta[ch] += d_series.sum();
        }
    }
    if revin_trainable {
        grads.add(revin.gamma, d_gamma.view());
        grads.add(revin.beta, d_beta.view());
    }
}

/// Draws window indices in shuffled epochs; the order depends only on the seed.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut s = Self {
            order: (0..len).collect(),
            pos: len,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        use rand::seq::SliceRandom;
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }

    /// Generator for dropout masks, derived from the sampler stream.
    pub fn fork_rng(&mut self) -> ChaCha8Rng {
        use rand::SeedableRng;
        ChaCha8Rng::seed_from_u64(self.rng.random())
    }
}
