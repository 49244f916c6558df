//! Patch embedding: convolutional token encoding, learned positions, and
//! multi-scale calendar embeddings, summed into one `T_p x D` sequence.

use chrono::{DateTime, Datelike, Timelike};
use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Grads, ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalAttribute {
    MinuteOfHour,
    HourOfDay,
    DayOfWeek,
    DayOfMonth,
    MonthOfYear,
}

impl TemporalAttribute {
    pub const ALL: [TemporalAttribute; 5] = [
        TemporalAttribute::MinuteOfHour,
        TemporalAttribute::HourOfDay,
        TemporalAttribute::DayOfWeek,
        TemporalAttribute::DayOfMonth,
        TemporalAttribute::MonthOfYear,
    ];

    pub fn cardinality(self) -> usize {
        match self {
            TemporalAttribute::MinuteOfHour => 60,
            TemporalAttribute::HourOfDay => 24,
            TemporalAttribute::DayOfWeek => 7,
            TemporalAttribute::DayOfMonth => 31,
            TemporalAttribute::MonthOfYear => 12,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TemporalAttribute::MinuteOfHour => "minute_of_hour",
            TemporalAttribute::HourOfDay => "hour_of_day",
            TemporalAttribute::DayOfWeek => "day_of_week",
            TemporalAttribute::DayOfMonth => "day_of_month",
            TemporalAttribute::MonthOfYear => "month_of_year",
        }
    }

    /// Zero-based index of this attribute for a UTC epoch-seconds timestamp.
    /// Days of the week start at Monday = 0.
    pub fn index(self, timestamp: i64) -> usize {
        let dt = DateTime::from_timestamp(timestamp, 0)
            .expect("timestamp within chrono range")
            .naive_utc();
        (match self {
            TemporalAttribute::MinuteOfHour => dt.minute(),
            TemporalAttribute::HourOfDay => dt.hour(),
            TemporalAttribute::DayOfWeek => dt.weekday().num_days_from_monday(),
            TemporalAttribute::DayOfMonth => dt.day0(),
            TemporalAttribute::MonthOfYear => dt.month0(),
        }) as usize
    }
}

/// Attribute indices per timestamp, in the order of `attributes`.
pub fn extract_calendar(timestamps: &[i64], attributes: &[TemporalAttribute]) -> Vec<Vec<usize>> {
    timestamps
        .iter()
        .map(|&t| attributes.iter().map(|a| a.index(t)).collect())
        .collect()
}

/// How per-timestamp temporal embeddings inside a patch are reduced.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// The patch's first timestamp represents the whole patch.
    #[default]
    SelectFirst,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Odd convolution width over the patch axis.
    pub kernel_width: usize,
    pub max_patches: usize,
    pub positional: bool,
    /// Empty disables the temporal embedding.
    pub attributes: Vec<TemporalAttribute>,
    pub pooling: Pooling,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kernel_width: 3,
            max_patches: 256,
            positional: true,
            attributes: TemporalAttribute::ALL.to_vec(),
            pooling: Pooling::SelectFirst,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_width == 0 || self.kernel_width.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "convolution width must be odd for symmetric padding, got {}",
                self.kernel_width
            )));
        }
        if self.max_patches == 0 {
            return Err(Error::Config("max_patches must be positive".into()));
        }
        for (i, a) in self.attributes.iter().enumerate() {
            if self.attributes[..i].contains(a) {
                return Err(Error::Config(format!("temporal attribute {} listed twice", a.as_str())));
            }
        }
        Ok(())
    }
}

/// Weighted table lookups that make up one patch's temporal embedding:
/// `(attribute slot, table row, weight)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalTokens<T> {
    pub per_patch: Vec<Vec<(usize, usize, T)>>,
}

impl<T: Scalar> TemporalTokens<T> {
    /// Lookups for every patch of a window whose rows carry `timestamps`.
    pub fn build(
        timestamps: &[i64],
        patch_len: usize,
        stride: usize,
        num_patches: usize,
        attributes: &[TemporalAttribute],
        pooling: Pooling,
    ) -> Self {
        let per_patch = (0..num_patches)
            .map(|j| {
                let start = j * stride;
                let span: &[i64] = match pooling {
                    Pooling::SelectFirst => &timestamps[start..start + 1],
                    Pooling::Mean => &timestamps[start..start + patch_len],
                };
                let w = T::one() / T::of(span.len() as f64);
                span.iter()
                    .flat_map(|&t| {
                        attributes
                            .iter()
                            .enumerate()
                            .map(move |(slot, a)| (slot, a.index(t), w))
                    })
                    .collect()
            })
            .collect();
        Self { per_patch }
    }

    pub fn num_patches(&self) -> usize {
        self.per_patch.len()
    }
}

/// Parameter handles for the three encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderIds {
    /// `D x P x k`
    pub conv_weight: ParamId,
    pub conv_bias: ParamId,
    pub positions: Option<ParamId>,
    pub tables: Vec<(TemporalAttribute, ParamId)>,
}

fn table_name(a: TemporalAttribute) -> String {
    format!("encoder.temporal.{}", a.as_str())
}

impl EncoderIds {
    pub fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        config: &EncoderConfig,
        patch_len: usize,
        d_model: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let k = config.kernel_width;
        let bound = 1.0 / ((patch_len * k) as f64).sqrt();
        let uni = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let conv_weight = store.push(
            "encoder.conv.weight",
            ParamGroup::Encoder,
            Array3::from_shape_simple_fn((d_model, patch_len, k), || T::of(uni.sample(rng))),
        )?;
        let conv_bias = store.push(
            "encoder.conv.bias",
            ParamGroup::Encoder,
            Array1::from_shape_simple_fn(d_model, || T::of(uni.sample(rng))),
        )?;
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let positions = if config.positional {
            Some(store.push(
                "encoder.pos",
                ParamGroup::Encoder,
                Array2::from_shape_simple_fn((config.max_patches, d_model), || T::of(normal.sample(rng))),
            )?)
        } else {
            None
        };
        let mut tables = Vec::new();
        for &a in &config.attributes {
            let table = Array2::from_shape_simple_fn((a.cardinality(), d_model), || T::of(normal.sample(rng)));
            tables.push((a, store.push(table_name(a), ParamGroup::Encoder, table)?));
        }
        Ok(Self {
            conv_weight,
            conv_bias,
            positions,
            tables,
        })
    }

    pub fn resolve<T: Scalar>(store: &ParamStore<T>, config: &EncoderConfig) -> Result<Self> {
        Ok(Self {
            conv_weight: store.require("encoder.conv.weight")?,
            conv_bias: store.require("encoder.conv.bias")?,
            positions: if config.positional {
                Some(store.require("encoder.pos")?)
            } else {
                None
            },
            tables: config
                .attributes
                .iter()
                .map(|&a| Ok((a, store.require(&table_name(a))?)))
                .collect::<Result<_>>()?,
        })
    }
}

// Output rows `j` with `0 <= j + shift < len` read input row `j + shift`.
fn shifted_ranges(len: usize, shift: isize) -> Option<(std::ops::Range<usize>, std::ops::Range<usize>)> {
    let lo = (-shift).max(0) as usize;
    let hi = (len as isize - shift).min(len as isize);
    if hi <= lo as isize {
        return None;
    }
    let hi = hi as usize;
    let src_lo = (lo as isize + shift) as usize;
    Some((lo..hi, src_lo..src_lo + (hi - lo)))
}

/// Stride-1 convolution along the patch axis with symmetric zero padding.
pub fn token_encode<T: Scalar>(
    store: &ParamStore<T>,
    ids: &EncoderIds,
    patches: ArrayView2<'_, T>,
) -> Result<Array2<T>> {
    let weight = store.tensor3(ids.conv_weight);
    let (d_model, p, k) = weight.dim();
    if patches.ncols() != p {
        return Err(Error::shape("token encoder input channels", p, patches.ncols()));
    }
    let len = patches.nrows();
    let pad = (k / 2) as isize;
    let mut out = Array2::zeros((len, d_model));
    out += &store.vec(ids.conv_bias);
    for o in 0..k {
        let w_o = weight.slice(s![.., .., o]);
        if let Some((dst, src)) = shifted_ranges(len, o as isize - pad) {
            let contrib = patches.slice(s![src, ..]).dot(&w_o.t());
            let mut rows = out.slice_mut(s![dst, ..]);
            rows += &contrib;
        }
    }
    Ok(out)
}

/// Rows of the positional table selected by `indices`.
pub fn positional_embed<T: Scalar>(store: &ParamStore<T>, table: ParamId, indices: &[usize]) -> Result<Array2<T>> {
    let table = store.mat(table);
    if let Some(&bad) = indices.iter().find(|&&i| i >= table.nrows()) {
        return Err(Error::OutOfRange {
            context: "positional table",
            index: bad,
            size: table.nrows(),
        });
    }
    Ok(table.select(Axis(0), indices))
}

/// Level 1 sums attribute tables per timestamp; level 2 pools within a patch
/// according to the weights baked into `tokens`.
pub fn temporal_embed<T: Scalar>(
    store: &ParamStore<T>,
    ids: &EncoderIds,
    tokens: &TemporalTokens<T>,
    d_model: usize,
) -> Array2<T> {
    let mut out = Array2::zeros((tokens.num_patches(), d_model));
    for (j, lookups) in tokens.per_patch.iter().enumerate() {
        let mut row = out.row_mut(j);
        for &(slot, idx, w) in lookups {
            row.scaled_add(w, &store.mat(ids.tables[slot].1).row(idx));
        }
    }
    out
}

/// Elementwise sum of the three encodings.
pub fn combine_embeddings<T: Scalar>(
    token: ArrayView2<'_, T>,
    position: ArrayView2<'_, T>,
    temporal: ArrayView2<'_, T>,
) -> Result<Array2<T>> {
    if token.dim() != position.dim() || token.dim() != temporal.dim() {
        return Err(Error::shape(
            "combine_embeddings",
            format!("{:?}", token.dim()),
            format!("{:?} / {:?}", position.dim(), temporal.dim()),
        ));
    }
    Ok(&token + &position + temporal)
}

/// Full encoder: `e = e_token + e_pos + e_temp` for one univariate channel.
pub fn encode<T: Scalar>(
    store: &ParamStore<T>,
    ids: &EncoderIds,
    patches: ArrayView2<'_, T>,
    tokens: &TemporalTokens<T>,
) -> Result<Array2<T>> {
    let mut e = token_encode(store, ids, patches)?;
    let len = e.nrows();
    if tokens.num_patches() != len && !ids.tables.is_empty() {
        return Err(Error::shape("temporal tokens", len, tokens.num_patches()));
    }
    if let Some(pos) = ids.positions {
        let indices: Vec<usize> = (0..len).collect();
        e += &positional_embed(store, pos, &indices)?;
    }
    if !ids.tables.is_empty() {
        e += &temporal_embed(store, ids, tokens, e.ncols());
    }
    Ok(e)
}

/// Accumulates encoder parameter gradients for upstream gradient `de`.
/// Returns the gradient with respect to `patches` when `input_grad` is set.
pub fn encode_backward<T: Scalar>(
    store: &ParamStore<T>,
    ids: &EncoderIds,
    patches: ArrayView2<'_, T>,
    tokens: &TemporalTokens<T>,
    de: ArrayView2<'_, T>,
    grads: &mut Grads<T>,
    input_grad: bool,
) -> Option<Array2<T>> {
    let weight = store.tensor3(ids.conv_weight);
    let k = weight.dim().2;
    let len = patches.nrows();
    let pad = (k / 2) as isize;

    grads.add(ids.conv_bias, de.sum_axis(Axis(0)).view());
    let mut d_patches = input_grad.then(|| Array2::zeros(patches.raw_dim()));
    for o in 0..k {
        let Some((dst, src)) = shifted_ranges(len, o as isize - pad) else {
            continue;
        };
        let d_rows = de.slice(s![dst, ..]);
        if let Some(mut gw) = grads.tensor3_mut(ids.conv_weight) {
            let mut gw_o = gw.slice_mut(s![.., .., o]);
            gw_o += &d_rows.t().dot(&patches.slice(s![src.clone(), ..]));
        }
        if let Some(dp) = d_patches.as_mut() {
            let mut rows = dp.slice_mut(s![src, ..]);
            rows += &d_rows.dot(&weight.slice(s![.., .., o]));
        }
    }
    if let Some(pos) = ids.positions {
        if let Some(mut g) = grads.mat_mut(pos) {
            let mut rows = g.slice_mut(s![..len, ..]);
            rows += &de;
        }
    }
    for (j, lookups) in tokens.per_patch.iter().enumerate() {
        for &(slot, idx, w) in lookups {
            if let Some(mut g) = grads.mat_mut(ids.tables[slot].1) {
                g.row_mut(idx).scaled_add(w, &de.row(j));
            }
        }
    }
    d_patches
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDateTime;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ts(s: &str) -> i64 {
        NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S")
            .unwrap()
            .and_utc()
            .timestamp()
    }

    // Zeller's congruence, Monday = 0.
    fn weekday_oracle(y: i64, m: i64, d: i64) -> usize {
        let (y, m) = if m < 3 { (y - 1, m + 12) } else { (y, m) };
        let h = (d + (13 * (m + 1)) / 5 + y + y / 4 - y / 100 + y / 400) % 7; // 0 = Saturday
        ((h + 5) % 7) as usize
    }

    fn setup(config: &EncoderConfig, p: usize, d: usize) -> (ParamStore<f64>, EncoderIds) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ids = EncoderIds::init(&mut store, config, p, d, &mut rng).unwrap();
        (store, ids)
    }

    #[test]
    fn calendar_fields() {
        let t = ts("2016-07-01 13:00:00");
        let idx = extract_calendar(&[t], &TemporalAttribute::ALL);
        assert_eq!(idx[0], vec![0, 13, 4, 0, 6]);
        let monday = ts("2016-07-04 00:00:00");
        assert_eq!(TemporalAttribute::DayOfWeek.index(monday), 0);
        assert_eq!(weekday_oracle(2016, 7, 4), 0);
        for (y, m, d) in [(2016, 2, 29), (2000, 1, 1), (2023, 12, 31), (1999, 3, 15)] {
            let t = ts(&format!("{y:04}-{m:02}-{d:02} 08:30:00"));
            assert_eq!(TemporalAttribute::DayOfWeek.index(t), weekday_oracle(y, m, d));
        }
    }

    #[test]
    fn calendar_day_shift() {
        let a = ts("2017-03-05 17:00:00");
        let b = a + 86_400;
        let attrs = [TemporalAttribute::HourOfDay, TemporalAttribute::DayOfWeek];
        let idx = extract_calendar(&[a, b], &attrs);
        assert_eq!(idx[0][0], idx[1][0]);
        assert_eq!((idx[0][1] + 1) % 7, idx[1][1]);
    }

    #[test]
    fn token_encode_shapes_and_degenerate_cases() {
        let config = EncoderConfig::default();
        let (store, ids) = setup(&config, 16, 768);
        let patches = Array2::from_shape_fn((41, 16), |(j, i)| ((j * 16 + i) as f64).cos());
        assert_eq!(token_encode(&store, &ids, patches.view()).unwrap().dim(), (41, 768));

        let zero = token_encode(&store, &ids, Array2::zeros((5, 16)).view()).unwrap();
        for row in zero.rows() {
            assert_eq!(row, store.vec(ids.conv_bias));
        }
        assert!(token_encode(&store, &ids, Array2::zeros((5, 8)).view()).is_err());
    }

    #[test]
    fn width_one_convolution_is_per_patch_linear() {
        let config = EncoderConfig {
            kernel_width: 1,
            ..EncoderConfig::default()
        };
        let (mut store, ids) = setup(&config, 4, 3);
        store.get_mut(ids.conv_bias).value.fill(0.0);
        let patches = Array2::from_shape_fn((6, 4), |(j, i)| (j as f64) - 0.5 * i as f64);
        let out = token_encode(&store, &ids, patches.view()).unwrap();
        let w = store.tensor3(ids.conv_weight).slice(s![.., .., 0]).to_owned();
        assert_eq!(out, patches.dot(&w.t()));
    }

    #[test]
    fn convolution_matches_direct_sum() {
        let config = EncoderConfig {
            kernel_width: 5,
            ..EncoderConfig::default()
        };
        let (store, ids) = setup(&config, 3, 4);
        let x = Array2::from_shape_fn((7, 3), |(j, i)| ((j * 3 + i) as f64 * 0.37).sin());
        let out = token_encode(&store, &ids, x.view()).unwrap();
        let w = store.tensor3(ids.conv_weight);
        let b = store.vec(ids.conv_bias);
        for j in 0..7 {
            for d in 0..4 {
                let mut acc = b[d];
                for o in 0..5 {
                    let src = j as isize + o as isize - 2;
                    if (0..7).contains(&src) {
                        for p in 0..3 {
                            acc += w[[d, p, o]] * x[[src as usize, p]];
                        }
                    }
                }
                assert!((acc - out[[j, d]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn positional_lookup() {
        let (store, ids) = setup(&EncoderConfig::default(), 4, 8);
        let pos = ids.positions.unwrap();
        let table = store.mat(pos);
        let out = positional_embed(&store, pos, &[0, 1, 2]).unwrap();
        assert_eq!(out.row(2), table.row(2));
        let rep = positional_embed(&store, pos, &[5, 5]).unwrap();
        assert_eq!(rep.row(0), rep.row(1));
        assert!(matches!(
            positional_embed(&store, pos, &[256]),
            Err(Error::OutOfRange {
                index: 256,
                size: 256,
                ..
            })
        ));
    }

    #[test]
    fn temporal_select_first() {
        let config = EncoderConfig {
            attributes: vec![TemporalAttribute::HourOfDay],
            ..EncoderConfig::default()
        };
        let (store, ids) = setup(&config, 4, 8);
        let start = ts("2016-07-01 13:00:00");
        let stamps: Vec<i64> = (0..12).map(|h| start + 3600 * h).collect();
        let tokens = TemporalTokens::<f64>::build(&stamps, 4, 4, 3, &config.attributes, Pooling::SelectFirst);
        let e = temporal_embed(&store, &ids, &tokens, 8);
        assert_eq!(e.row(0), store.mat(ids.tables[0].1).row(13));

        // later timestamps within a patch do not matter
        let mut perturbed = stamps.clone();
        perturbed[1] += 7 * 3600;
        perturbed[6] += 2 * 86_400;
        let tokens2 = TemporalTokens::<f64>::build(&perturbed, 4, 4, 3, &config.attributes, Pooling::SelectFirst);
        assert_eq!(temporal_embed(&store, &ids, &tokens2, 8), e);

        // same first hour one day apart
        let day: Vec<i64> = (0..28).map(|h| start + 3600 * h).collect();
        let tokens3 = TemporalTokens::<f64>::build(&day, 4, 24, 2, &config.attributes, Pooling::SelectFirst);
        let e3 = temporal_embed(&store, &ids, &tokens3, 8);
        assert_eq!(e3.row(0), e3.row(1));
    }

    #[test]
    fn temporal_zero_tables_and_mean_pooling() {
        let config = EncoderConfig {
            attributes: vec![TemporalAttribute::HourOfDay, TemporalAttribute::DayOfWeek],
            pooling: Pooling::Mean,
            ..EncoderConfig::default()
        };
        let (mut store, ids) = setup(&config, 2, 3);
        let stamps = [0, 3600, 7200, 10800];
        let tokens = TemporalTokens::<f64>::build(&stamps, 2, 2, 2, &config.attributes, Pooling::Mean);
        let e = temporal_embed(&store, &ids, &tokens, 3);
        let hour = store.mat(ids.tables[0].1);
        let dow = store.mat(ids.tables[1].1);
        // 1970-01-01 was a Thursday
        let expected = (&hour.row(0) + &hour.row(1)) * 0.5 + dow.row(3);
        assert!((&e.row(0) - &expected).iter().all(|d| d.abs() < 1e-15));
        for (_, id) in &ids.tables {
            store.get_mut(*id).value.fill(0.0);
        }
        assert!(temporal_embed(&store, &ids, &tokens, 3).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn combine_is_additive() {
        let a = array![[1.0f64, 2.0], [3.0, 4.0]];
        let b = array![[0.5, 0.5], [0.5, 0.5]];
        let z = Array2::<f64>::zeros((2, 2));
        assert_eq!(combine_embeddings(z.view(), z.view(), z.view()).unwrap(), z);
        assert_eq!(combine_embeddings(a.view(), b.view(), z.view()).unwrap(), &a + &b);
        assert_eq!(
            combine_embeddings(a.view(), b.view(), z.view()).unwrap(),
            combine_embeddings(z.view(), a.view(), b.view()).unwrap()
        );
        assert!(combine_embeddings(a.view(), b.view(), Array2::zeros((3, 2)).view()).is_err());
    }

    #[test]
    fn zeroed_encoder_emits_zeros() {
        let config = EncoderConfig::default();
        let (mut store, ids) = setup(&config, 4, 6);
        for p in store.iter_mut() {
            p.value.fill(0.0);
        }
        let stamps: Vec<i64> = (0..16).map(|t| t * 3600).collect();
        let tokens = TemporalTokens::build(&stamps, 4, 4, 4, &config.attributes, config.pooling);
        let patches = Array2::from_elem((4, 4), 3.0);
        let e = encode(&store, &ids, patches.view(), &tokens).unwrap();
        assert!(e.iter().all(|&v| v == 0.0));
    }
}
